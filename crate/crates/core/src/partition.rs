//! Set partitions of study indices: canonical labels, the Chinese
//! restaurant process prior, the maximum transfer distance, projection,
//! enumeration and loss-based point estimation.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A partition of `0..S` stored as canonical labels: study 0 has label 0
/// and each new cluster takes the smallest unused label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Partition(Vec<usize>);

impl TryFrom<Vec<usize>> for Partition {
    type Error = Error;

    fn try_from(labels: Vec<usize>) -> Result<Self> {
        let p = Partition::from_labels(&labels);
        if p.0 != labels {
            return Err(Error::InvalidData(format!("labels {labels:?} are not canonical")));
        }
        Ok(p)
    }
}

impl From<Partition> for Vec<usize> {
    fn from(p: Partition) -> Self {
        p.0
    }
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .clusters()
            .iter()
            .map(|c| format!("{{{}}}", c.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(",")))
            .collect();
        write!(f, "({})", parts.join(","))
    }
}

impl Partition {
    /// Canonicalizes arbitrary cluster labels.
    pub fn from_labels(labels: &[usize]) -> Partition {
        let mut map = HashMap::new();
        Partition(
            labels
                .iter()
                .map(|l| {
                    let next = map.len();
                    *map.entry(*l).or_insert(next)
                })
                .collect(),
        )
    }

    /// From a list of clusters covering `0..s` exactly once.
    pub fn from_clusters(s: usize, clusters: &[Vec<usize>]) -> Result<Partition> {
        let mut labels = vec![usize::MAX; s];
        for (c, members) in clusters.iter().enumerate() {
            for &i in members {
                if i >= s || labels[i] != usize::MAX {
                    return Err(Error::InvalidArgument(format!("element {i} is out of range or repeated")));
                }
                labels[i] = c;
            }
        }
        if labels.contains(&usize::MAX) {
            return Err(Error::InvalidArgument("clusters do not cover every element".into()));
        }
        Ok(Partition::from_labels(&labels))
    }

    pub fn singletons(s: usize) -> Partition {
        Partition((0..s).collect())
    }

    pub fn one_cluster(s: usize) -> Partition {
        Partition(vec![0; s])
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn n_clusters(&self) -> usize {
        self.0.iter().max().map_or(0, |m| m + 1)
    }

    pub fn label(&self, s: usize) -> usize {
        self.0[s]
    }

    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters()];
        for (i, &l) in self.0.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_clusters()];
        for &l in &self.0 {
            out[l] += 1;
        }
        out
    }

    /// Members of the cluster containing `s`, including `s`.
    pub fn cluster_of(&self, s: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.0[i] == self.0[s]).collect()
    }

    pub fn together(&self, a: usize, b: usize) -> bool {
        self.0[a] == self.0[b]
    }
}

/// Log probability of `p` under the Chinese restaurant process with
/// concentration `alpha`.
pub fn crp_log_prior(p: &Partition, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("concentration {alpha} must be positive")));
    }
    let sizes = p.cluster_sizes();
    let m = sizes.len() as f64;
    // log Gamma(n) and the rising factorial log Gamma(alpha + S) - log Gamma(alpha)
    // as explicit sums of logs
    let ln_fact = |n: usize| (1..n).map(|k| (k as f64).ln()).sum::<f64>();
    let rising: f64 = (0..p.len()).map(|i| (alpha + i as f64).ln()).sum();
    Ok(sizes.iter().map(|&n| ln_fact(n)).sum::<f64>() + m * alpha.ln() - rising)
}

/// Minimum-cost perfect assignment on a square cost matrix (row `i` gets
/// column `result[i]`), by the shortest augmenting path method in `O(n^3)`.
pub fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    const INF: i64 = i64::MAX / 4;
    // 1-based potentials with a virtual column 0
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        result[owner[j] - 1] = j - 1;
    }
    result
}

/// Maximum transfer distance: the fewest single-element moves turning `a`
/// into `b`, equal to `S` minus the largest total cluster overlap under a
/// one-to-one matching of clusters.
pub fn transfer_distance(a: &Partition, b: &Partition) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    Ok(transfer_distance_unchecked(a.labels(), b.labels()))
}

pub(crate) fn transfer_distance_unchecked(a: &[usize], b: &[usize]) -> usize {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let k = ka.max(kb);
    let mut overlap = vec![vec![0i64; k]; k];
    for (&x, &y) in a.iter().zip(b) {
        overlap[x][y] += 1;
    }
    let cost: Vec<Vec<i64>> = overlap.iter().map(|row| row.iter().map(|&o| -o).collect()).collect();
    let assign = min_cost_assignment(&cost);
    let matched: i64 = assign.iter().enumerate().map(|(i, &j)| overlap[i][j]).sum();
    a.len() - matched as usize
}

/// Restriction of `p` to the elements `subset` (in that order),
/// re-canonicalized.
pub fn project(p: &Partition, subset: &[usize]) -> Result<Partition> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("projection subset is empty".into()));
    }
    let mut seen = vec![false; p.len()];
    for &i in subset {
        if i >= p.len() || seen[i] {
            return Err(Error::InvalidArgument(format!("subset index {i} is out of range or repeated")));
        }
        seen[i] = true;
    }
    Ok(Partition::from_labels(&subset.iter().map(|&i| p.label(i)).collect::<Vec<_>>()))
}

pub const MAX_ENUMERATION_SIZE: usize = 10;

/// All partitions of `0..s` in lexicographic order of canonical labels.
pub fn enumerate_partitions(s: usize) -> Result<Vec<Partition>> {
    if s == 0 || s > MAX_ENUMERATION_SIZE {
        return Err(Error::Size(format!("enumeration supports 1 to {MAX_ENUMERATION_SIZE} elements, got {s}")));
    }
    let mut out = Vec::new();
    let mut labels = vec![0usize; s];
    fn rec(pos: usize, max: usize, labels: &mut Vec<usize>, out: &mut Vec<Partition>) {
        if pos == labels.len() {
            out.push(Partition(labels.clone()));
            return;
        }
        for l in 0..=max + 1 {
            labels[pos] = l;
            rec(pos + 1, max.max(l), labels, out);
        }
    }
    // label of element 0 is fixed at 0; `max` tracks the largest label so far
    if s == 1 {
        out.push(Partition(labels));
    } else {
        rec(1, 0, &mut labels, &mut out);
    }
    Ok(out)
}

/// Tuning of the point-estimate search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointEstimateOptions {
    /// Atoms kept for loss evaluation, heaviest first.
    pub max_atoms: usize,
    /// Number of best starting candidates refined by local search.
    pub refine_top: usize,
}

impl Default for PointEstimateOptions {
    fn default() -> Self {
        PointEstimateOptions { max_atoms: 1000, refine_top: 4 }
    }
}

fn expected_loss(c: &[usize], atoms: &[(Partition, f64)]) -> f64 {
    atoms.iter().map(|(p, w)| w * transfer_distance_unchecked(c, p.labels()) as f64).sum()
}

/// Strict preference between two candidates: lower loss, then fewer
/// clusters, then lexicographically smaller labels.
fn better(a: (&Partition, f64), b: (&Partition, f64)) -> bool {
    const EPS: f64 = 1e-12;
    if a.1 < b.1 - EPS {
        return true;
    }
    if a.1 > b.1 + EPS {
        return false;
    }
    (a.0.n_clusters(), a.0.labels()) < (b.0.n_clusters(), b.0.labels())
}

/// Every partition one element move away from `p`.
pub fn neighbors(p: &Partition) -> Vec<Partition> {
    let k = p.n_clusters();
    let mut out = Vec::new();
    for i in 0..p.len() {
        for target in 0..=k {
            if target == p.label(i) {
                continue;
            }
            let mut labels = p.labels().to_vec();
            labels[i] = target;
            let q = Partition::from_labels(&labels);
            if q != *p {
                out.push(q);
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

fn local_search(start: Partition, atoms: &[(Partition, f64)]) -> (Partition, f64) {
    let mut best = start;
    let mut best_loss = expected_loss(best.labels(), atoms);
    loop {
        let candidates = neighbors(&best);
        let scored: Vec<(Partition, f64)> =
            candidates.into_par_iter().map(|q| {
                let l = expected_loss(q.labels(), atoms);
                (q, l)
            }).collect();
        let mut improved = false;
        for (q, l) in scored {
            if l < best_loss - 1e-12 {
                best = q;
                best_loss = l;
                improved = true;
            }
        }
        if !improved {
            return (best, best_loss);
        }
    }
}

/// Bayes estimate under transfer-distance loss for a weighted posterior
/// given as `(partition, probability)` atoms.
pub fn point_estimate_weighted(
    atoms: &[(Partition, f64)],
    candidates: Option<&[Partition]>,
    opts: PointEstimateOptions,
) -> Result<Partition> {
    if atoms.is_empty() {
        return Err(Error::InvalidArgument("no posterior atoms".into()));
    }
    let s = atoms[0].0.len();
    if atoms.iter().any(|(p, w)| p.len() != s || !(*w >= 0.0)) {
        return Err(Error::InvalidArgument("atoms must share one size and have non-negative weights".into()));
    }
    let mut merged: HashMap<&Partition, f64> = HashMap::new();
    for (p, w) in atoms {
        *merged.entry(p).or_default() += w;
    }
    let mut sorted: Vec<(Partition, f64)> = merged.into_iter().map(|(p, w)| (p.clone(), w)).collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let total: f64 = sorted.iter().map(|a| a.1).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("atom weights sum to zero".into()));
    }
    let kept: Vec<(Partition, f64)> = sorted.iter().take(opts.max_atoms.max(1)).map(|(p, w)| (p.clone(), w / total)).collect();

    let mut pool: Vec<Partition> = match candidates {
        Some(c) => c.to_vec(),
        None => kept.iter().map(|a| a.0.clone()).collect(),
    };
    if pool.iter().any(|p| p.len() != s) {
        return Err(Error::InvalidArgument("candidate size differs from the posterior".into()));
    }
    pool.sort();
    pool.dedup();
    let mut scored: Vec<(Partition, f64)> =
        pool.into_par_iter().map(|c| {
            let l = expected_loss(c.labels(), &kept);
            (c, l)
        }).collect();
    scored.sort_by(|a, b| {
        if better((&a.0, a.1), (&b.0, b.1)) {
            std::cmp::Ordering::Less
        } else if better((&b.0, b.1), (&a.0, a.1)) {
            std::cmp::Ordering::Greater
        } else {
            std::cmp::Ordering::Equal
        }
    });
    let mut best = scored[0].clone();
    if candidates.is_none() {
        for (start, _) in scored.iter().take(opts.refine_top) {
            let refined = local_search(start.clone(), &kept);
            if better((&refined.0, refined.1), (&best.0, best.1)) {
                best = refined;
            }
        }
    }
    Ok(best.0)
}

/// Bayes estimate from posterior draws.
pub fn point_estimate(samples: &[Partition], candidates: Option<&[Partition]>) -> Result<Partition> {
    let atoms: Vec<(Partition, f64)> = samples.iter().map(|p| (p.clone(), 1.0)).collect();
    point_estimate_weighted(&atoms, candidates, PointEstimateOptions::default())
}

/// Posterior expected transfer distance of `c` under weighted atoms.
pub fn posterior_expected_loss(c: &Partition, atoms: &[(Partition, f64)]) -> f64 {
    let total: f64 = atoms.iter().map(|a| a.1).sum();
    expected_loss(c.labels(), atoms) / total
}
