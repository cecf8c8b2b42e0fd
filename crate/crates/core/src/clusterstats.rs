//! Cluster-based validation statistics built on a partition posterior, and
//! the adjustment that glues posteriors computed at two training-size
//! thresholds.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arraymodel::{fit_posterior, ArrayModel, FittedPosterior, ModelConfig};
use crate::bootstrap::{bootstrap_z, estimate_dispersion, BootstrapOptions, DEFAULT_JITTER_FLOOR, DEFAULT_SHRINKAGE};
use crate::data::StudyCollection;
use crate::learners::LearnerSpec;
use crate::metrics::MetricSpec;
use crate::partition::{project, Partition};
use crate::rng::{tag, SeedStream};
use crate::zharness::{threshold_members, Harness, ZMatrix};
use crate::{Error, Result};

/// Default number of subsample fits behind each `Z^j` value.
pub const DEFAULT_SUBSAMPLE_ITERATIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    PosteriorAveraged,
    PlugIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStatEstimate {
    pub target_study: String,
    /// `None` when no draw satisfies the conditioning event.
    pub value: Option<f64>,
    pub conditioning_probability: f64,
    pub method: EstimateMethod,
    pub j: Option<usize>,
    pub n_effective_samples: usize,
}

fn check_draws(harness: &Harness, draws: &[Partition], s: usize) -> Result<()> {
    let n = harness.collection().len();
    if s >= n {
        return Err(Error::InvalidArgument(format!("study index {s} out of range")));
    }
    if let Some(p) = draws.iter().find(|p| p.len() != n) {
        return Err(Error::DimensionMismatch { expected: n, found: p.len() });
    }
    Ok(())
}

/// Distinct clusters `B(s)` among the draws satisfying `keep`, with counts.
fn cluster_counts(draws: &[Partition], s: usize, keep: impl Fn(&[usize]) -> bool) -> BTreeMap<Vec<usize>, usize> {
    let mut out = BTreeMap::new();
    for p in draws {
        let b = p.cluster_of(s);
        if keep(&b) {
            *out.entry(b).or_default() += 1;
        }
    }
    out
}

fn average(counts: &BTreeMap<Vec<usize>, usize>, eval: impl Fn(&[usize]) -> Result<f64> + Sync) -> Result<Option<f64>> {
    let n: usize = counts.values().sum();
    if n == 0 {
        return Ok(None);
    }
    let entries: Vec<(&Vec<usize>, &usize)> = counts.iter().collect();
    let values = entries.par_iter().map(|(b, _)| eval(b)).collect::<Result<Vec<f64>>>()?;
    let total: f64 = values.iter().zip(&entries).map(|(v, (_, &c))| v * c as f64).sum();
    Ok(Some(total / n as f64))
}

/// `Z_{B(s),s}` averaged over the draws in which `s` shares its cluster.
pub fn estimate_zbs(harness: &Harness, draws: &[Partition], s: usize) -> Result<ClusterStatEstimate> {
    check_draws(harness, draws, s)?;
    let counts = cluster_counts(draws, s, |b| b.len() > 1);
    let n_eff: usize = counts.values().sum();
    let value = average(&counts, |b| harness.z_combined(b, s))?;
    Ok(ClusterStatEstimate {
        target_study: harness.collection().study(s).id().to_string(),
        value,
        conditioning_probability: if draws.is_empty() { 0.0 } else { n_eff as f64 / draws.len() as f64 },
        method: EstimateMethod::PosteriorAveraged,
        j: None,
        n_effective_samples: n_eff,
    })
}

/// `Z_{B(s),s}` at the cluster of `s` in a point-estimate partition.
pub fn plug_in_zbs(harness: &Harness, point: &Partition, s: usize) -> Result<ClusterStatEstimate> {
    let mut est = estimate_zbs(harness, std::slice::from_ref(point), s)?;
    est.method = EstimateMethod::PlugIn;
    Ok(est)
}

/// `Z^j_{B(s),s}` for each `j`, averaged over draws whose pool
/// `B(s) \ {s}` holds at least `j` rows.
pub fn estimate_zjbs_curve(
    harness: &Harness,
    draws: &[Partition],
    s: usize,
    j_grid: &[usize],
    iterations: usize,
) -> Result<Vec<ClusterStatEstimate>> {
    check_draws(harness, draws, s)?;
    check_grid(j_grid)?;
    j_grid
        .iter()
        .map(|&j| {
            let counts = cluster_counts(draws, s, |b| b.len() > 1 && harness.pool_size(b, s) >= j);
            let n_eff: usize = counts.values().sum();
            let value = average(&counts, |b| harness.z_subsampled(b, s, j, iterations))?;
            Ok(ClusterStatEstimate {
                target_study: harness.collection().study(s).id().to_string(),
                value,
                conditioning_probability: if draws.is_empty() { 0.0 } else { n_eff as f64 / draws.len() as f64 },
                method: EstimateMethod::PosteriorAveraged,
                j: Some(j),
                n_effective_samples: n_eff,
            })
        })
        .collect()
}

fn check_grid(j_grid: &[usize]) -> Result<()> {
    if j_grid.contains(&0) || j_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("j grid must be positive and sorted ascending".into()));
    }
    Ok(())
}

/// The same curve with the cluster replaced by all studies.
pub fn reference_curve(harness: &Harness, s: usize, j_grid: &[usize], iterations: usize) -> Result<Vec<Option<f64>>> {
    check_grid(j_grid)?;
    let all: Vec<usize> = (0..harness.collection().len()).collect();
    j_grid
        .iter()
        .map(|&j| {
            if harness.pool_size(&all, s) >= j {
                harness.z_subsampled(&all, s, j, iterations).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub study_id: String,
    pub j: usize,
    pub estimate: Option<f64>,
    pub conditioning_probability: f64,
    pub reference_estimate: Option<f64>,
}

/// Curve rows for every study in turn.
pub fn curve_table(harness: &Harness, draws: &[Partition], j_grid: &[usize], iterations: usize) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::new();
    for s in 0..harness.collection().len() {
        let curve = estimate_zjbs_curve(harness, draws, s, j_grid, iterations)?;
        let reference = reference_curve(harness, s, j_grid, iterations)?;
        rows.extend(curve.into_iter().zip(reference).map(|(c, r)| CurveRow {
            study_id: c.target_study,
            j: c.j.unwrap_or_default(),
            estimate: c.value,
            conditioning_probability: c.conditioning_probability,
            reference_estimate: r,
        }));
    }
    Ok(rows)
}

pub fn write_curve_csv(rows: &[CurveRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for row in rows {
        w.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))?.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionProbability {
    pub labels: Partition,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedPartitionPosterior {
    /// Atoms over all studies, in partition order.
    pub probabilities: Vec<PartitionProbability>,
    pub threshold_low: Option<usize>,
    pub threshold_high: Option<usize>,
    /// Indices of the studies meeting the high threshold.
    pub included_high: Vec<usize>,
}

impl AdjustedPartitionPosterior {
    pub fn as_map(&self) -> BTreeMap<Partition, f64> {
        self.probabilities.iter().map(|a| (a.labels.clone(), a.probability)).collect()
    }

    /// Distribution of the projection onto the high-threshold studies.
    pub fn pushforward(&self) -> Result<BTreeMap<Partition, f64>> {
        let mut out: BTreeMap<Partition, f64> = BTreeMap::new();
        for a in &self.probabilities {
            *out.entry(project(&a.labels, &self.included_high)?).or_default() += a.probability;
        }
        Ok(out)
    }
}

/// Largest absolute difference between two distributions over partitions.
pub fn max_abs_difference(a: &BTreeMap<Partition, f64>, b: &BTreeMap<Partition, f64>) -> f64 {
    a.keys()
        .chain(b.keys())
        .map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs())
        .fold(0.0, f64::max)
}

const NORMALIZATION_TOL: f64 = 1e-6;

fn check_normalized(name: &str, p: &BTreeMap<Partition, f64>, len: usize) -> Result<()> {
    if p.values().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument(format!("{name} posterior has a negative or non-finite mass")));
    }
    let total: f64 = p.values().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::InvalidArgument(format!("{name} posterior sums to {total}, not 1")));
    }
    if let Some(q) = p.keys().find(|q| q.len() != len) {
        return Err(Error::DimensionMismatch { expected: len, found: q.len() });
    }
    Ok(())
}

/// `p(pi) = low(pi) high(D(pi)) / sum_{D(pi') = D(pi)} low(pi')`, with `D`
/// the projection onto `subset`. Atoms in fibers of zero mass get nothing.
pub fn threshold_adjusted_posterior(
    low: &BTreeMap<Partition, f64>,
    high: &BTreeMap<Partition, f64>,
    subset: &[usize],
) -> Result<AdjustedPartitionPosterior> {
    let s = low.keys().next().map_or(0, |p| p.len());
    if s == 0 {
        return Err(Error::InvalidArgument("low-threshold posterior is empty".into()));
    }
    check_normalized("low-threshold", low, s)?;
    check_normalized("high-threshold", high, subset.len())?;
    let mut fiber: BTreeMap<Partition, f64> = BTreeMap::new();
    let mut images = Vec::with_capacity(low.len());
    for (p, &w) in low {
        let d = project(p, subset)?;
        if w > 0.0 {
            *fiber.entry(d.clone()).or_default() += w;
        }
        images.push(d);
    }
    if let Some((q, _)) = high.iter().find(|(q, &w)| w > 0.0 && fiber.get(*q).is_none_or(|&f| f <= 0.0)) {
        return Err(Error::DegenerateFiber(format!(
            "{q} has positive high-threshold mass but no low-threshold partition projects onto it; increase sampler iterations"
        )));
    }
    let probabilities = low
        .iter()
        .zip(images)
        .map(|((p, &w), d)| {
            let probability = match (high.get(&d), fiber.get(&d)) {
                (Some(&h), Some(&f)) if w > 0.0 && f > 0.0 => w * h / f,
                _ => 0.0,
            };
            PartitionProbability { labels: p.clone(), probability }
        })
        .collect();
    Ok(AdjustedPartitionPosterior { probabilities, threshold_low: None, threshold_high: None, included_high: subset.to_vec() })
}

/// Settings for the two-threshold pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub subsample_iterations: usize,
    pub bootstrap: BootstrapOptions,
    pub shrinkage_lambda: f64,
    pub jitter_floor: f64,
    pub model: ModelConfig,
    /// Enumerate partitions instead of sampling; defaults to enumeration
    /// when the array has at most 10 studies.
    pub exact: Option<bool>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            subsample_iterations: DEFAULT_SUBSAMPLE_ITERATIONS,
            bootstrap: BootstrapOptions::default(),
            shrinkage_lambda: DEFAULT_SHRINKAGE,
            jitter_floor: DEFAULT_JITTER_FLOOR,
            model: ModelConfig::default(),
            exact: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPipelineResult {
    pub study_ids: Vec<String>,
    pub z_low: ZMatrix,
    pub z_high: ZMatrix,
    pub posterior_low: FittedPosterior,
    pub posterior_high: FittedPosterior,
    pub adjusted: AdjustedPartitionPosterior,
    /// Largest deviation of the adjusted posterior's projection from the
    /// high-threshold posterior.
    pub pushforward_error: f64,
}

/// Array, bootstrap dispersion and partition posterior at one threshold.
fn posterior_at(harness: &Harness, n0: usize, config: &PipelineConfig, key: u64) -> Result<(ZMatrix, FittedPosterior)> {
    let z = harness.compute_z_adjusted(n0, config.subsample_iterations)?;
    let opts = BootstrapOptions { training_size: Some(n0), ..config.bootstrap.clone() };
    let reps = bootstrap_z(harness, &opts)?;
    let disp = estimate_dispersion(&reps, config.shrinkage_lambda, config.jitter_floor)?;
    let model = ArrayModel::new(&z, &disp, &config.model)?;
    let exact = config.exact.unwrap_or(z.size() <= crate::partition::MAX_ENUMERATION_SIZE);
    let post = fit_posterior(&model, &config.model, exact, harness.seeds().child(&[tag::PIPELINE, key]))?;
    Ok((z, post))
}

/// Posteriors at a low threshold over all studies and at a high threshold
/// over the studies large enough for it, glued by
/// [`threshold_adjusted_posterior`].
pub fn run_threshold_pipeline(
    collection: StudyCollection,
    learner: LearnerSpec,
    metric: MetricSpec,
    threshold_low: usize,
    threshold_high: usize,
    config: &PipelineConfig,
    seeds: SeedStream,
) -> Result<ThresholdPipelineResult> {
    if threshold_low > threshold_high {
        return Err(Error::Threshold(format!("low threshold {threshold_low} exceeds high threshold {threshold_high}")));
    }
    let min_n = collection.studies().iter().map(|s| s.n()).min().unwrap_or(0);
    if threshold_low > min_n {
        return Err(Error::Threshold(format!(
            "low threshold {threshold_low} exceeds the smallest study size {min_n}"
        )));
    }
    let included_high = threshold_members(&collection, threshold_high)?;
    let study_ids = collection.ids();
    let harness = Harness::new(collection, learner, metric, seeds)?;
    let (z_low, posterior_low) = posterior_at(&harness, threshold_low, config, 0)?;
    let (z_high, posterior_high) = posterior_at(&harness, threshold_high, config, 1)?;
    let mut adjusted = threshold_adjusted_posterior(&posterior_low.as_map(), &posterior_high.as_map(), &included_high)?;
    adjusted.threshold_low = Some(threshold_low);
    adjusted.threshold_high = Some(threshold_high);
    let pushforward_error = max_abs_difference(&adjusted.pushforward()?, &posterior_high.as_map());
    Ok(ThresholdPipelineResult { study_ids, z_low, z_high, posterior_low, posterior_high, adjusted, pushforward_error })
}

/// Plain-text rendering of cluster estimates.
pub fn write_estimates_text(out: &mut impl Write, estimates: &[ClusterStatEstimate]) -> std::io::Result<()> {
    for e in estimates {
        let value = e.value.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
        writeln!(
            out,
            "{:<12} {:<18} value={value} P(event)={:.4} draws={}",
            e.target_study,
            match e.method {
                EstimateMethod::PosteriorAveraged => "posterior_averaged",
                EstimateMethod::PlugIn => "plug_in",
            },
            e.conditioning_probability,
            e.n_effective_samples
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Outcome, StudyDataset};
    use crate::partition::enumerate_partitions;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn study(id: &str, n: usize, shift: f64, rng: &mut ChaCha8Rng) -> StudyDataset {
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = (0..n).map(|i| shift + x[(i, 0)] - 0.5 * x[(i, 1)] + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        StudyDataset::new(id, x, Outcome::Continuous(y), vec!["a".into(), "b".into()]).unwrap()
    }

    fn harness(sizes: &[usize]) -> Harness {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let studies = sizes.iter().enumerate().map(|(k, &n)| study(&format!("s{k}"), n, k as f64 * 0.2, &mut rng)).collect();
        Harness::new(StudyCollection::new(studies).unwrap(), LearnerSpec::ols(), MetricSpec::mse(), SeedStream::new(3))
            .unwrap()
    }

    #[test]
    fn all_singletons_is_undefined() {
        let h = harness(&[30, 30, 30, 30]);
        let draws = vec![Partition::singletons(4); 5];
        let e = estimate_zbs(&h, &draws, 1).unwrap();
        assert_eq!(e.value, None);
        assert_eq!(e.conditioning_probability, 0.0);
        assert_eq!(e.n_effective_samples, 0);
    }

    #[test]
    fn point_mass_gives_combined_value() {
        let h = harness(&[30, 30, 30, 30]);
        let p = Partition::from_labels(&[0, 0, 1, 2]);
        let e = estimate_zbs(&h, &[p.clone()], 0).unwrap();
        assert_eq!(e.value, Some(h.z_combined(&[1], 0).unwrap()));
        assert_eq!(e.conditioning_probability, 1.0);
        let plug = plug_in_zbs(&h, &p, 0).unwrap();
        assert_eq!(plug.value, e.value);
        assert_eq!(plug.method, EstimateMethod::PlugIn);
    }

    #[test]
    fn averaged_over_hand_written_draws() {
        let h = harness(&[30, 25, 40, 35]);
        let draws = vec![
            Partition::from_labels(&[0, 0, 1, 1]),
            Partition::from_labels(&[0, 0, 0, 1]),
            Partition::from_labels(&[0, 1, 2, 3]),
            Partition::from_labels(&[0, 0, 1, 1]),
        ];
        let z01 = h.z_combined(&[0, 1], 0).unwrap();
        let z012 = h.z_combined(&[0, 1, 2], 0).unwrap();
        let e = estimate_zbs(&h, &draws, 0).unwrap();
        let want = (2.0 * z01 + z012) / 3.0;
        assert!((e.value.unwrap() - want).abs() < 1e-15);
        assert_eq!(e.conditioning_probability, 0.75);
        assert_eq!(e.n_effective_samples, 3);
    }

    #[test]
    fn curve_conditioning_is_monotone_and_undefined_beyond_pool() {
        let h = harness(&[30, 20, 40, 35]);
        let draws = vec![
            Partition::from_labels(&[0, 0, 1, 1]),
            Partition::from_labels(&[0, 0, 0, 1]),
            Partition::from_labels(&[0, 1, 1, 0]),
        ];
        let grid = [10, 20, 35, 60, 200];
        let curve = estimate_zjbs_curve(&h, &draws, 0, &grid, 3).unwrap();
        for w in curve.windows(2) {
            assert!(w[1].conditioning_probability <= w[0].conditioning_probability);
        }
        // pools: {1} = 20, {1,2} = 60, {3} = 35
        let probs: Vec<f64> = curve.iter().map(|c| c.conditioning_probability).collect();
        assert_eq!(probs, vec![1.0, 1.0, 2.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert_eq!(curve[4].value, None);
        let reference = reference_curve(&h, 0, &grid, 3).unwrap();
        assert!(reference[..4].iter().all(|r| r.is_some()));
        assert_eq!(reference[4], None);
    }

    #[test]
    fn full_pool_curve_matches_combined() {
        let h = harness(&[30, 20, 40]);
        let p = Partition::from_labels(&[0, 0, 1]);
        let curve = estimate_zjbs_curve(&h, &[p], 0, &[20], 4).unwrap();
        let combined = h.z_combined(&[0, 1], 0).unwrap();
        assert!((curve[0].value.unwrap() - combined).abs() < 1e-10);
    }

    #[test]
    fn unsorted_grid_is_rejected() {
        let h = harness(&[30, 20]);
        assert!(estimate_zjbs_curve(&h, &[Partition::one_cluster(2)], 0, &[20, 10], 2).is_err());
    }

    #[test]
    fn curve_csv_has_expected_columns() {
        let h = harness(&[30, 20, 40]);
        let rows = curve_table(&h, &[Partition::from_labels(&[0, 0, 1])], &[10, 15], 2).unwrap();
        assert_eq!(rows.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        write_curve_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("study_id,j,estimate,conditioning_probability,reference_estimate\n"));
        assert_eq!(text.lines().count(), 7);
    }

    fn map(atoms: &[(&[usize], f64)]) -> BTreeMap<Partition, f64> {
        atoms.iter().map(|(l, w)| (Partition::from_labels(l), *w)).collect()
    }

    #[test]
    fn identity_projection_returns_high_posterior() {
        let low = map(&[(&[0, 0, 1], 0.3), (&[0, 1, 2], 0.7)]);
        let high = map(&[(&[0, 0, 0], 0.2), (&[0, 0, 1], 0.5), (&[0, 1, 2], 0.3)]);
        let low_full: BTreeMap<Partition, f64> = enumerate_partitions(3).unwrap().into_iter().map(|p| (p, 0.2)).collect();
        let adj = threshold_adjusted_posterior(&low_full, &high, &[0, 1, 2]).unwrap();
        assert!(max_abs_difference(&adj.as_map(), &high) < 1e-15);
        // the identity projection needs the low posterior to cover high's support
        assert!(matches!(threshold_adjusted_posterior(&low, &high, &[0, 1, 2]), Err(Error::DegenerateFiber(_))));
    }

    #[test]
    fn uniform_low_gives_closed_form() {
        let all = enumerate_partitions(4).unwrap();
        let low: BTreeMap<Partition, f64> = all.iter().map(|p| (p.clone(), 1.0 / 15.0)).collect();
        let high = map(&[(&[0, 0], 0.25), (&[0, 1], 0.75)]);
        let subset = [1, 3];
        let adj = threshold_adjusted_posterior(&low, &high, &subset).unwrap();
        let fiber_together = all.iter().filter(|p| p.together(1, 3)).count() as f64;
        let fiber_apart = 15.0 - fiber_together;
        for a in &adj.probabilities {
            let want = if a.labels.together(1, 3) { 0.25 / fiber_together } else { 0.75 / fiber_apart };
            assert!((a.probability - want).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_adjustment() {
        // four studies, the high threshold keeps studies 0, 1, 2
        let low = map(&[
            (&[0, 0, 0, 0], 0.1),
            (&[0, 0, 0, 1], 0.2),
            (&[0, 0, 1, 1], 0.3),
            (&[0, 1, 1, 1], 0.15),
            (&[0, 1, 2, 3], 0.25),
        ]);
        let high = map(&[
            (&[0, 0, 0], 0.4),
            (&[0, 0, 1], 0.3),
            (&[0, 1, 1], 0.1),
            (&[0, 1, 2], 0.15),
            (&[0, 1, 0], 0.05),
        ]);
        // fibers: {0,0,0} <- 0.1 + 0.2; {0,0,1} <- 0.3; {0,1,1} <- 0.15; {0,1,2} <- 0.25; {0,1,0} empty
        let err = threshold_adjusted_posterior(&low, &high, &[0, 1, 2]).unwrap_err();
        assert!(matches!(err, Error::DegenerateFiber(ref m) if m.contains("({1,3},{2})")), "{err}");
        let high = map(&[(&[0, 0, 0], 0.4), (&[0, 0, 1], 0.3), (&[0, 1, 1], 0.1), (&[0, 1, 2], 0.2)]);
        let adj = threshold_adjusted_posterior(&low, &high, &[0, 1, 2]).unwrap().as_map();
        let want = map(&[
            (&[0, 0, 0, 0], 0.1 * 0.4 / 0.3),
            (&[0, 0, 0, 1], 0.2 * 0.4 / 0.3),
            (&[0, 0, 1, 1], 0.3),
            (&[0, 1, 1, 1], 0.1),
            (&[0, 1, 2, 3], 0.2),
        ]);
        assert!(max_abs_difference(&adj, &want) < 1e-15);
    }

    #[test]
    fn unnormalized_inputs_are_rejected() {
        let low = map(&[(&[0, 0], 0.5)]);
        let high = map(&[(&[0, 0], 1.0)]);
        assert!(threshold_adjusted_posterior(&low, &high, &[0, 1]).is_err());
    }

    fn random_posterior(support: Vec<Partition>, raw: &[f64]) -> BTreeMap<Partition, f64> {
        let total: f64 = raw.iter().take(support.len()).sum();
        support.into_iter().zip(raw).map(|(p, &w)| (p, w / total)).collect()
    }

    proptest! {
        #[test]
        fn pushforward_identity(s in 2usize..=6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut subset: Vec<usize> = (0..s).filter(|_| rng.random_bool(0.6)).collect();
            if subset.is_empty() {
                subset.push(rng.random_range(0..s));
            }
            let all = enumerate_partitions(s).unwrap();
            let raw: Vec<f64> = (0..all.len()).map(|_| rng.random::<f64>() + 1e-3).collect();
            let low = random_posterior(all, &raw);
            let high_all = enumerate_partitions(subset.len()).unwrap();
            let raw: Vec<f64> = (0..high_all.len()).map(|_| rng.random::<f64>()).collect();
            let high = random_posterior(high_all, &raw);
            let adj = threshold_adjusted_posterior(&low, &high, &subset).unwrap();
            let total: f64 = adj.probabilities.iter().map(|a| a.probability).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(max_abs_difference(&adj.pushforward().unwrap(), &high) < 1e-9);
        }
    }

    fn fast_config() -> PipelineConfig {
        PipelineConfig {
            subsample_iterations: 2,
            bootstrap: BootstrapOptions { replicates: 20, ..BootstrapOptions::default() },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn pipeline_two_studies() {
        let h = harness(&[30, 40]);
        let out = run_threshold_pipeline(
            h.collection().clone(),
            LearnerSpec::ols(),
            MetricSpec::mse(),
            20,
            30,
            &fast_config(),
            SeedStream::new(4),
        )
        .unwrap();
        assert_eq!(out.adjusted.probabilities.len(), 2);
        let total: f64 = out.adjusted.probabilities.iter().map(|a| a.probability).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // both studies qualify at the high threshold, so nothing changes
        assert!(max_abs_difference(&out.adjusted.as_map(), &out.posterior_high.as_map()) < 1e-12);
        assert!(out.pushforward_error < 1e-9);
    }

    #[test]
    fn pipeline_drops_small_studies_at_high_threshold() {
        let h = harness(&[30, 40, 50, 25]);
        let out = run_threshold_pipeline(
            h.collection().clone(),
            LearnerSpec::ols(),
            MetricSpec::mse(),
            20,
            40,
            &fast_config(),
            SeedStream::new(5),
        )
        .unwrap();
        assert_eq!(out.adjusted.included_high, vec![1, 2]);
        assert_eq!(out.z_high.excluded_studies, vec!["s0".to_string(), "s3".to_string()]);
        assert!(out.pushforward_error < 1e-9);
        assert!(run_threshold_pipeline(
            h.collection().clone(),
            LearnerSpec::ols(),
            MetricSpec::mse(),
            26,
            40,
            &fast_config(),
            SeedStream::new(5),
        )
        .is_err());
    }
}
