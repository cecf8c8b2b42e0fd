//! The Gaussian array model with a latent partition of studies.
//!
//! Given a partition `pi` with clusters `C(s)`, each entry of the array is
//! `Z[s][v] = mu[C(s)][C(v)] + eps[s][v]` with block means drawn
//! independently from `N(m0, tau0^2)` and `eps ~ N(0, Sigma)`, `Sigma` the
//! bootstrap dispersion estimate. Block means integrate out analytically,
//! so the marginal likelihood of a partition is the density of the
//! vectorized array under `N(m0 1, tau0^2 X X' + Sigma)` with `X` the
//! entry-to-block indicator matrix. It is evaluated through the
//! precision of `Sigma` and a `K x K` system, `K` the number of nonempty
//! blocks. The partition prior is a Chinese restaurant process.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::DispersionEstimate;
use crate::partition::{crp_log_prior, enumerate_partitions, point_estimate_weighted, Partition, PointEstimateOptions};
use crate::rng::{tag, SeedStream};
use crate::stats;
use crate::zharness::{pair_order, ZMatrix};
use crate::{Error, Result};

/// Prior and sampler settings. `m0` and `tau0sq` default to the mean and
/// sample variance of the observed entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub alpha: f64,
    pub m0: Option<f64>,
    pub tau0sq: Option<f64>,
    pub mcmc_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { alpha: 1.0, m0: None, tau0sq: None, mcmc_iterations: 5000, burn_in: 1000, thin: 2, chains: 2 }
    }
}

/// Floor on the empirical prior variance of block means.
pub const TAU0SQ_FLOOR: f64 = 1e-6;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument("alpha must be positive".into()));
        }
        if let Some(t) = self.tau0sq {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidArgument("tau0sq must be positive".into()));
            }
        }
        if self.m0.is_some_and(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("m0 must be finite".into()));
        }
        if self.burn_in >= self.mcmc_iterations {
            return Err(Error::InvalidArgument("burn_in must be smaller than mcmc_iterations".into()));
        }
        if self.thin == 0 || self.chains == 0 {
            return Err(Error::InvalidArgument("thin and chains must be at least 1".into()));
        }
        Ok(())
    }

    /// `(m0, tau0sq)` with empirical defaults filled in from `z`.
    pub fn prior_for(&self, z: &ZMatrix) -> (f64, f64) {
        let v = z.vectorize();
        let m0 = self.m0.unwrap_or_else(|| stats::mean(&v));
        let tau0sq = self.tau0sq.unwrap_or_else(|| {
            let var = stats::sample_variance(&v);
            if var.is_finite() { var.max(TAU0SQ_FLOOR) } else { TAU0SQ_FLOOR }
        });
        (m0, tau0sq)
    }
}

/// One posterior draw: a partition and the means of its `m x m` blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub partition: Partition,
    /// Row-major `m x m` block means, `m` the number of clusters.
    pub mu_blocks: Vec<f64>,
    /// Unnormalized log posterior of the partition.
    pub log_posterior: f64,
}

impl PosteriorSample {
    pub fn mu(&self, a: usize, b: usize) -> f64 {
        self.mu_blocks[a * self.partition.n_clusters() + b]
    }

    /// Block mean governing entry `(s, v)`.
    pub fn mu_for_pair(&self, s: usize, v: usize) -> f64 {
        self.mu(self.partition.label(s), self.partition.label(v))
    }
}

/// Block structure of a partition over the vectorized entries.
struct Blocks {
    m: usize,
    /// Compressed nonempty-block index of every entry.
    entry_block: Vec<usize>,
    /// `(row cluster, column cluster)` of each nonempty block.
    block_pair: Vec<(usize, usize)>,
}

impl Blocks {
    fn new(p: &Partition, pairs: &[(usize, usize)]) -> Blocks {
        let m = p.n_clusters();
        let mut compress = vec![usize::MAX; m * m];
        let mut block_pair = Vec::new();
        let entry_block = pairs
            .iter()
            .map(|&(s, v)| {
                let (a, b) = (p.label(s), p.label(v));
                let full = a * m + b;
                if compress[full] == usize::MAX {
                    compress[full] = block_pair.len();
                    block_pair.push((a, b));
                }
                compress[full]
            })
            .collect();
        Blocks { m, entry_block, block_pair }
    }

    fn k(&self) -> usize {
        self.block_pair.len()
    }
}

/// Block-mean posterior under one partition.
struct BlockPosterior {
    blocks: Blocks,
    log_ml: f64,
    /// Posterior mean of each nonempty block.
    mean: DVector<f64>,
    /// Cholesky factor of `I + tau0^2 X' P X`.
    chol: Cholesky<f64, Dyn>,
}

/// Array model for a fixed observed array and dispersion estimate.
pub struct ArrayModel {
    s: usize,
    pairs: Vec<(usize, usize)>,
    precision: DMatrix<f64>,
    log_det_sigma: f64,
    /// `P (z - m0)`.
    pr: DVector<f64>,
    /// `(z - m0)' P (z - m0)`.
    quad: f64,
    m0: f64,
    tau0sq: f64,
    alpha: f64,
    study_ids: Vec<String>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl ArrayModel {
    pub fn new(z: &ZMatrix, disp: &DispersionEstimate, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = z.dim();
        if disp.dim() != d || disp.study_ids.len() != z.size() {
            return Err(Error::DimensionMismatch { expected: d, found: disp.dim() });
        }
        let sigma = disp.matrix();
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("dispersion matrix is not positive definite".into()))?;
        let log_det_sigma = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        let precision = (&precision + precision.transpose()) * 0.5;
        let (m0, tau0sq) = config.prior_for(z);
        let r = DVector::from_iterator(d, z.vectorize().into_iter().map(|v| v - m0));
        let pr = &precision * &r;
        let quad = r.dot(&pr);
        Ok(ArrayModel {
            s: z.size(),
            pairs: pair_order(z.size()),
            precision,
            log_det_sigma,
            pr,
            quad,
            m0,
            tau0sq,
            alpha: config.alpha,
            study_ids: z.study_ids.clone(),
        })
    }

    pub fn n_studies(&self) -> usize {
        self.s
    }

    pub fn m0(&self) -> f64 {
        self.m0
    }

    pub fn tau0sq(&self) -> f64 {
        self.tau0sq
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn study_ids(&self) -> &[String] {
        &self.study_ids
    }

    fn check_partition(&self, p: &Partition) -> Result<()> {
        if p.len() != self.s {
            return Err(Error::DimensionMismatch { expected: self.s, found: p.len() });
        }
        Ok(())
    }

    fn block_posterior(&self, p: &Partition) -> Result<BlockPosterior> {
        self.check_partition(p)?;
        let blocks = Blocks::new(p, &self.pairs);
        let k = blocks.k();
        let d = self.pairs.len();
        let mut a = DMatrix::<f64>::zeros(k, k);
        for col in 0..d {
            let bc = blocks.entry_block[col];
            let pcol = self.precision.column(col);
            for row in 0..d {
                a[(blocks.entry_block[row], bc)] += pcol[row];
            }
        }
        let mut b = DVector::<f64>::zeros(k);
        for row in 0..d {
            b[blocks.entry_block[row]] += self.pr[row];
        }
        let mut mmat = a * self.tau0sq;
        for i in 0..k {
            mmat[(i, i)] += 1.0;
        }
        let mmat = (&mmat + mmat.transpose()) * 0.5;
        let chol = mmat
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("block system is not positive definite for partition {p}")))?;
        let log_det_m = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let minv_b = chol.solve(&b);
        let quad = self.quad - self.tau0sq * b.dot(&minv_b);
        let log_ml = -0.5 * (d as f64 * LN_2PI + self.log_det_sigma + log_det_m + quad);
        if !log_ml.is_finite() {
            return Err(Error::Numerical(format!("non-finite marginal likelihood for partition {p}")));
        }
        let mean = minv_b * self.tau0sq + DVector::from_element(k, self.m0);
        Ok(BlockPosterior { blocks, log_ml, mean, chol })
    }

    /// Log density of the observed array given the partition, block means
    /// integrated out.
    pub fn log_marginal_likelihood(&self, p: &Partition) -> Result<f64> {
        Ok(self.block_posterior(p)?.log_ml)
    }

    /// CRP log prior plus log marginal likelihood.
    pub fn log_posterior(&self, p: &Partition) -> Result<f64> {
        Ok(crp_log_prior(p, self.alpha)? + self.log_marginal_likelihood(p)?)
    }

    /// Posterior mean of every `m x m` block; blocks without entries keep
    /// the prior mean.
    pub fn mu_posterior_mean(&self, p: &Partition) -> Result<Vec<f64>> {
        let bp = self.block_posterior(p)?;
        let m = bp.blocks.m;
        let mut out = vec![self.m0; m * m];
        for (i, &(a, b)) in bp.blocks.block_pair.iter().enumerate() {
            out[a * m + b] = bp.mean[i];
        }
        Ok(out)
    }

    /// Draw block means given the partition. Blocks without entries are
    /// drawn from the prior.
    pub fn sample_mu<R: Rng + ?Sized>(&self, p: &Partition, rng: &mut R) -> Result<PosteriorSample> {
        let bp = self.block_posterior(p)?;
        self.draw_from(p, &bp, rng)
    }

    fn draw_from<R: Rng + ?Sized>(&self, p: &Partition, bp: &BlockPosterior, rng: &mut R) -> Result<PosteriorSample> {
        let m = bp.blocks.m;
        let k = bp.blocks.k();
        let xi = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
        // cov = tau0^2 M^{-1} = tau0^2 L^{-T} L^{-1}
        let dev = bp
            .chol
            .l_dirty()
            .clone()
            .lower_triangle()
            .transpose()
            .solve_upper_triangular(&xi)
            .ok_or_else(|| Error::Numerical(format!("triangular solve failed for partition {p}")))?;
        let sd = self.tau0sq.sqrt();
        let mut mu = vec![f64::NAN; m * m];
        for (i, &(a, b)) in bp.blocks.block_pair.iter().enumerate() {
            mu[a * m + b] = bp.mean[i] + sd * dev[i];
        }
        for v in mu.iter_mut().filter(|v| v.is_nan()) {
            *v = self.m0 + sd * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(PosteriorSample {
            partition: p.clone(),
            mu_blocks: mu,
            log_posterior: crp_log_prior(p, self.alpha)? + bp.log_ml,
        })
    }
}

/// Posterior probabilities of every partition, in enumeration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactPosterior {
    pub atoms: Vec<(Partition, f64)>,
}

impl ExactPosterior {
    pub fn probability(&self, p: &Partition) -> f64 {
        self.atoms.iter().find(|(q, _)| q == p).map_or(0.0, |a| a.1)
    }

    pub fn map_partition(&self) -> &Partition {
        &self
            .atoms
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .expect("posterior has atoms")
            .0
    }

    pub fn as_map(&self) -> BTreeMap<Partition, f64> {
        self.atoms.iter().cloned().collect()
    }

    /// Posterior probability that `a` and `b` share a cluster.
    pub fn coclustering(&self) -> DMatrix<f64> {
        let s = self.atoms.first().map_or(0, |a| a.0.len());
        let mut out = DMatrix::zeros(s, s);
        for (p, w) in &self.atoms {
            for a in 0..s {
                for b in 0..s {
                    if p.together(a, b) {
                        out[(a, b)] += w;
                    }
                }
            }
        }
        out
    }
}

/// Exact posterior over all partitions (at most 10 studies).
pub fn exact_posterior(model: &ArrayModel) -> Result<ExactPosterior> {
    let all = enumerate_partitions(model.n_studies())?;
    let logs = all.par_iter().map(|p| model.log_posterior(p)).collect::<Result<Vec<f64>>>()?;
    let norm = stats::log_sum_exp(&logs);
    Ok(ExactPosterior { atoms: all.into_iter().zip(logs).map(|(p, l)| (p, (l - norm).exp())).collect() })
}

/// `E[mu[C(s)][C(v)] | Z]` under the exact posterior, `NaN` on the diagonal.
pub fn exact_mu_mean(model: &ArrayModel, posterior: &ExactPosterior) -> Result<DMatrix<f64>> {
    let s = model.n_studies();
    let parts = posterior
        .atoms
        .par_iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(p, w)| {
            let mu = model.mu_posterior_mean(p)?;
            let m = p.n_clusters();
            Ok(DMatrix::from_fn(s, s, |a, b| w * mu[p.label(a) * m + p.label(b)]))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = parts.into_iter().fold(DMatrix::zeros(s, s), |acc, m| acc + m);
    for a in 0..s {
        out[(a, a)] = f64::NAN;
    }
    Ok(out)
}

/// Independent draws from the exact posterior.
pub fn sample_exact<R: Rng + ?Sized>(
    model: &ArrayModel,
    posterior: &ExactPosterior,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<PosteriorSample>> {
    let cumulative: Vec<f64> = posterior
        .atoms
        .iter()
        .scan(0.0, |acc, (_, w)| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().unwrap_or(&0.0);
    let mut cache: HashMap<usize, BlockPosterior> = HashMap::new();
    (0..draws)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            let idx = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
            let p = &posterior.atoms[idx].0;
            if !cache.contains_key(&idx) {
                cache.insert(idx, model.block_posterior(p)?);
            }
            model.draw_from(p, &cache[&idx], rng)
        })
        .collect()
}

/// Output of the collapsed Gibbs sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsOutput {
    /// Retained draws, chain by chain.
    pub samples: Vec<PosteriorSample>,
    pub chain_lengths: Vec<usize>,
    /// Largest absolute difference in co-clustering frequency between any
    /// two chains.
    pub between_chain_gap: f64,
}

fn gibbs_chain(model: &ArrayModel, config: &ModelConfig, mut rng: impl Rng) -> Result<Vec<PosteriorSample>> {
    let s = model.n_studies();
    let mut labels: Vec<usize> = (0..s).collect();
    let mut cache: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut log_ml = |p: &Partition| -> Result<f64> {
        if let Some(&v) = cache.get(p.labels()) {
            return Ok(v);
        }
        let v = model.log_marginal_likelihood(p)?;
        cache.insert(p.labels().to_vec(), v);
        Ok(v)
    };
    let mut order: Vec<usize> = (0..s).collect();
    let mut out = Vec::new();
    for it in 0..config.mcmc_iterations {
        order.shuffle(&mut rng);
        for &i in &order {
            // clusters of the other studies
            let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
            for (j, &l) in labels.iter().enumerate() {
                if j != i {
                    *sizes.entry(l).or_default() += 1;
                }
            }
            let fresh = (0..=s).find(|l| !sizes.contains_key(l)).unwrap();
            let options: Vec<(usize, f64)> = sizes
                .iter()
                .map(|(&l, &n)| (l, (n as f64).ln()))
                .chain(std::iter::once((fresh, model.alpha.ln())))
                .collect();
            let mut logw = Vec::with_capacity(options.len());
            for &(l, prior) in &options {
                labels[i] = l;
                logw.push(prior + log_ml(&Partition::from_labels(&labels))?);
            }
            let norm = stats::log_sum_exp(&logw);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = options.len() - 1;
            for (k, lw) in logw.iter().enumerate() {
                acc += (lw - norm).exp();
                if u < acc {
                    pick = k;
                    break;
                }
            }
            labels[i] = options[pick].0;
        }
        if it >= config.burn_in && (it - config.burn_in) % config.thin == 0 {
            let p = Partition::from_labels(&labels);
            out.push(model.sample_mu(&p, &mut rng)?);
        }
    }
    Ok(out)
}

/// Collapsed Gibbs sampler over partitions, started from all singletons,
/// with independent chains keyed by chain index.
pub fn gibbs_sample(model: &ArrayModel, config: &ModelConfig, seeds: SeedStream) -> Result<GibbsOutput> {
    config.validate()?;
    let chains = (0..config.chains)
        .into_par_iter()
        .map(|c| gibbs_chain(model, config, seeds.rng(&[tag::GIBBS, c as u64])))
        .collect::<Result<Vec<_>>>()?;
    let s = model.n_studies();
    let cocl: Vec<DMatrix<f64>> = chains.iter().map(|c| coclustering(c, s)).collect();
    let mut gap: f64 = 0.0;
    for a in 0..cocl.len() {
        for b in a + 1..cocl.len() {
            gap = gap.max((&cocl[a] - &cocl[b]).abs().max());
        }
    }
    Ok(GibbsOutput {
        chain_lengths: chains.iter().map(|c| c.len()).collect(),
        samples: chains.into_iter().flatten().collect(),
        between_chain_gap: gap,
    })
}

fn coclustering(samples: &[PosteriorSample], s: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(s, s);
    for x in samples {
        for a in 0..s {
            for b in 0..s {
                if x.partition.together(a, b) {
                    out[(a, b)] += 1.0;
                }
            }
        }
    }
    out / samples.len().max(1) as f64
}

/// Relative frequency of each sampled partition.
pub fn partition_frequencies(samples: &[PosteriorSample]) -> BTreeMap<Partition, f64> {
    let mut out: BTreeMap<Partition, f64> = BTreeMap::new();
    for x in samples {
        *out.entry(x.partition.clone()).or_default() += 1.0;
    }
    let n = samples.len() as f64;
    out.values_mut().for_each(|v| *v /= n);
    out
}

/// Total variation distance between two distributions over partitions.
pub fn total_variation(a: &BTreeMap<Partition, f64>, b: &BTreeMap<Partition, f64>) -> f64 {
    let mut keys: Vec<&Partition> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys.iter().map(|k| (a.get(*k).unwrap_or(&0.0) - b.get(*k).unwrap_or(&0.0)).abs()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFrequency {
    pub labels: Partition,
    pub frequency: f64,
}

/// Mean and equal-tailed credible interval of one quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalSummary {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl IntervalSummary {
    /// Equal-tailed quantile interval at `level`, widened if needed so it
    /// contains the mean.
    pub fn from_draws(draws: &[f64], level: f64) -> IntervalSummary {
        let mut sorted = draws.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = stats::mean(draws);
        let tail = (1.0 - level) / 2.0;
        let lower = stats::quantile_sorted(&sorted, tail).min(mean);
        let upper = stats::quantile_sorted(&sorted, 1.0 - tail).max(mean);
        IntervalSummary { mean, lower, upper }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub study_ids: Vec<String>,
    pub coclustering: Vec<Vec<f64>>,
    /// `None` on the diagonal.
    pub mu_posterior_mean: Vec<Vec<Option<f64>>>,
    pub mu_credible: Vec<Vec<Option<IntervalSummary>>>,
    pub credible_level: f64,
    /// Sorted by decreasing frequency, then labels.
    pub partition_frequencies: Vec<PartitionFrequency>,
    pub point_estimate: Partition,
}

/// Co-clustering, block-mean summaries and point estimate from draws.
pub fn summarize(samples: &[PosteriorSample], level: f64, study_ids: &[String]) -> Result<PosteriorSummary> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no posterior samples to summarize".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument("credible level must lie in (0, 1)".into()));
    }
    let s = samples[0].partition.len();
    if study_ids.len() != s || samples.iter().any(|x| x.partition.len() != s) {
        return Err(Error::DimensionMismatch { expected: s, found: study_ids.len() });
    }
    let cocl = coclustering(samples, s);
    let mut mean = vec![vec![None; s]; s];
    let mut cred = vec![vec![None; s]; s];
    for a in 0..s {
        for b in 0..s {
            if a != b {
                let draws: Vec<f64> = samples.iter().map(|x| x.mu_for_pair(a, b)).collect();
                let iv = IntervalSummary::from_draws(&draws, level);
                mean[a][b] = Some(iv.mean);
                cred[a][b] = Some(iv);
            }
        }
    }
    let freqs = partition_frequencies(samples);
    let atoms: Vec<(Partition, f64)> = freqs.iter().map(|(p, w)| (p.clone(), *w)).collect();
    let point = point_estimate_weighted(&atoms, None, PointEstimateOptions::default())?;
    let mut partition_frequencies: Vec<PartitionFrequency> =
        freqs.into_iter().map(|(labels, frequency)| PartitionFrequency { labels, frequency }).collect();
    partition_frequencies.sort_by(|a, b| b.frequency.total_cmp(&a.frequency).then_with(|| a.labels.cmp(&b.labels)));
    Ok(PosteriorSummary {
        study_ids: study_ids.to_vec(),
        coclustering: (0..s).map(|a| (0..s).map(|b| cocl[(a, b)]).collect()).collect(),
        mu_posterior_mean: mean,
        mu_credible: cred,
        credible_level: level,
        partition_frequencies,
        point_estimate: point,
    })
}

/// Probabilities that a new study joins each existing cluster of `p`
/// (cluster order), followed by the probability of a new cluster.
pub fn predictive_weights(p: &Partition, alpha: f64) -> Vec<f64> {
    let denom = p.len() as f64 + alpha;
    p.cluster_sizes().into_iter().map(|n| n as f64 / denom).chain(std::iter::once(alpha / denom)).collect()
}

/// Predictive summaries for a future study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewStudyPrediction {
    pub study_ids: Vec<String>,
    /// Block mean for training on the new study and validating on study `s`.
    pub train_on_new: Vec<IntervalSummary>,
    /// Block mean for training on study `s` and validating on the new study.
    pub validate_on_new: Vec<IntervalSummary>,
    /// Fraction of draws in which the new study opened its own cluster.
    pub new_cluster_fraction: f64,
}

/// One CRP step per draw places the new study; a new cluster gets fresh
/// block means from the prior.
pub fn predict_new_study<R: Rng + ?Sized>(
    samples: &[PosteriorSample],
    model: &ArrayModel,
    level: f64,
    rng: &mut R,
) -> Result<NewStudyPrediction> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no posterior samples".into()));
    }
    let s = model.n_studies();
    let sd = model.tau0sq.sqrt();
    let mut train = vec![Vec::with_capacity(samples.len()); s];
    let mut validate = vec![Vec::with_capacity(samples.len()); s];
    let mut new_count = 0usize;
    for x in samples {
        let w = predictive_weights(&x.partition, model.alpha);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = w.len() - 1;
        for (k, wk) in w.iter().enumerate() {
            acc += wk;
            if u < acc {
                pick = k;
                break;
            }
        }
        let is_new = pick == w.len() - 1;
        new_count += is_new as usize;
        for v in 0..s {
            let c = x.partition.label(v);
            if is_new {
                train[v].push(model.m0 + sd * rng.sample::<f64, _>(StandardNormal));
                validate[v].push(model.m0 + sd * rng.sample::<f64, _>(StandardNormal));
            } else {
                train[v].push(x.mu(pick, c));
                validate[v].push(x.mu(c, pick));
            }
        }
    }
    Ok(NewStudyPrediction {
        study_ids: model.study_ids.clone(),
        train_on_new: train.iter().map(|d| IntervalSummary::from_draws(d, level)).collect(),
        validate_on_new: validate.iter().map(|d| IntervalSummary::from_draws(d, level)).collect(),
        new_cluster_fraction: new_count as f64 / samples.len() as f64,
    })
}

/// Partition posterior with block-mean draws, from enumeration or from the
/// Gibbs sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPosterior {
    pub exact: bool,
    /// Exact probabilities, or empirical frequencies of the Gibbs draws.
    pub atoms: Vec<(Partition, f64)>,
    pub samples: Vec<PosteriorSample>,
    pub between_chain_gap: Option<f64>,
}

impl FittedPosterior {
    pub fn as_map(&self) -> BTreeMap<Partition, f64> {
        self.atoms.iter().cloned().collect()
    }

    pub fn partitions(&self) -> Vec<Partition> {
        self.samples.iter().map(|x| x.partition.clone()).collect()
    }
}

/// Retained draws per chain under `config`.
pub fn retained_per_chain(config: &ModelConfig) -> usize {
    (config.mcmc_iterations - config.burn_in).div_ceil(config.thin)
}

/// Exact enumeration draws as many independent samples as the sampler
/// would retain.
pub fn fit_posterior(model: &ArrayModel, config: &ModelConfig, exact: bool, seeds: SeedStream) -> Result<FittedPosterior> {
    config.validate()?;
    if exact {
        let post = exact_posterior(model)?;
        let n = retained_per_chain(config) * config.chains;
        let samples = sample_exact(model, &post, n, &mut seeds.rng(&[tag::POSTERIOR_DRAW]))?;
        Ok(FittedPosterior { exact: true, atoms: post.atoms, samples, between_chain_gap: None })
    } else {
        let out = gibbs_sample(model, config, seeds)?;
        Ok(FittedPosterior {
            exact: false,
            atoms: partition_frequencies(&out.samples).into_iter().collect(),
            samples: out.samples,
            between_chain_gap: Some(out.between_chain_gap),
        })
    }
}

/// Monte Carlo distribution of the number of clusters under the CRP prior
/// for `s` elements: entry `k` is the probability of `k + 1` clusters.
pub fn prior_cluster_counts<R: Rng + ?Sized>(s: usize, alpha: f64, draws: usize, rng: &mut R) -> Vec<f64> {
    let mut counts = vec![0usize; s];
    for _ in 0..draws {
        let mut m = 0usize;
        for i in 0..s {
            if rng.random::<f64>() < alpha / (i as f64 + alpha) {
                m += 1;
            }
        }
        counts[m.max(1) - 1] += 1;
    }
    counts.into_iter().map(|c| c as f64 / draws as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::LearnerSpec;
    use crate::metrics::MetricSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zmatrix(values: DMatrix<f64>) -> ZMatrix {
        let s = values.nrows();
        ZMatrix::new((0..s).map(|k| format!("s{k}")).collect(), values, MetricSpec::mse(), LearnerSpec::ols()).unwrap()
    }

    fn diag_disp(s: usize, var: f64) -> DispersionEstimate {
        let d = s * (s - 1);
        DispersionEstimate::from_covariance((0..s).map(|k| format!("s{k}")).collect(), DMatrix::identity(d, d) * var)
            .unwrap()
    }

    fn config(m0: f64, tau0sq: f64) -> ModelConfig {
        ModelConfig { m0: Some(m0), tau0sq: Some(tau0sq), ..ModelConfig::default() }
    }

    fn block_z(truth: &Partition, means: &[f64], rng: Option<(&mut ChaCha8Rng, f64)>) -> ZMatrix {
        let s = truth.len();
        let m = truth.n_clusters();
        let mut values = DMatrix::from_fn(s, s, |a, b| means[truth.label(a) * m + truth.label(b)]);
        if let Some((rng, sd)) = rng {
            values.iter_mut().for_each(|v| *v += sd * rng.sample::<f64, _>(StandardNormal));
        }
        zmatrix(values)
    }

    /// Dense Gaussian log density.
    fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let d = x.len() as f64;
        let chol = cov.clone().cholesky().unwrap();
        let r = x - mean;
        let sol = chol.solve(&r);
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (d * LN_2PI + logdet + r.dot(&sol))
    }

    fn random_z(s: usize, seed: u64) -> ZMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        zmatrix(DMatrix::from_fn(s, s, |_, _| rng.random::<f64>()))
    }

    fn random_disp(s: usize, seed: u64) -> DispersionEstimate {
        let d = s * (s - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
        let cov = &a * a.transpose() * 0.05 + DMatrix::identity(d, d) * 0.02;
        DispersionEstimate::from_covariance((0..s).map(|k| format!("s{k}")).collect(), cov).unwrap()
    }

    #[test]
    fn marginal_likelihood_matches_dense_density() {
        let z = random_z(4, 1);
        let disp = random_disp(4, 2);
        let cfg = config(0.4, 0.3);
        let model = ArrayModel::new(&z, &disp, &cfg).unwrap();
        let pairs = pair_order(4);
        let x = DVector::from_vec(z.vectorize());
        let mean = DVector::from_element(12, 0.4);
        for p in enumerate_partitions(4).unwrap() {
            let mut cov = disp.matrix();
            for (k, &(a, b)) in pairs.iter().enumerate() {
                for (l, &(c, d)) in pairs.iter().enumerate() {
                    if p.label(a) == p.label(c) && p.label(b) == p.label(d) {
                        cov[(k, l)] += 0.3;
                    }
                }
            }
            let want = gaussian_log_density(&x, &mean, &cov);
            let got = model.log_marginal_likelihood(&p).unwrap();
            assert!((got - want).abs() < 1e-9, "{p}: {got} vs {want}");
        }
    }

    #[test]
    fn vanishing_prior_variance_ignores_partition() {
        let z = random_z(3, 3);
        let disp = random_disp(3, 4);
        let model = ArrayModel::new(&z, &disp, &config(0.5, 1e-12)).unwrap();
        let base = gaussian_log_density(&DVector::from_vec(z.vectorize()), &DVector::from_element(6, 0.5), &disp.matrix());
        for p in enumerate_partitions(3).unwrap() {
            assert!((model.log_marginal_likelihood(&p).unwrap() - base).abs() < 1e-6);
        }
    }

    #[test]
    fn singletons_give_independent_blocks() {
        // with three studies the six off-diagonal entries fall in six blocks
        let z = random_z(3, 5);
        let disp = random_disp(3, 6);
        let model = ArrayModel::new(&z, &disp, &config(0.1, 0.7)).unwrap();
        let cov = disp.matrix() + DMatrix::identity(6, 6) * 0.7;
        let want = gaussian_log_density(&DVector::from_vec(z.vectorize()), &DVector::from_element(6, 0.1), &cov);
        let got = model.log_marginal_likelihood(&Partition::singletons(3)).unwrap();
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn marginal_likelihood_matches_monte_carlo_integral() {
        let truth = Partition::from_labels(&[0, 0, 1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = block_z(&truth, &[0.0, 1.0, 0.5, 0.2], Some((&mut rng, 0.5)));
        let var = 0.6;
        let (m0, tau0sq) = (0.3, 0.4);
        let model = ArrayModel::new(&z, &diag_disp(4, var), &config(m0, tau0sq)).unwrap();
        let exact = model.log_marginal_likelihood(&truth).unwrap().exp();
        let pairs = pair_order(4);
        let zv = z.vectorize();
        let n = 200_000;
        let lik: Vec<f64> = (0..n)
            .map(|_| {
                let mu: Vec<f64> = (0..4).map(|_| m0 + tau0sq.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
                let ll: f64 = pairs
                    .iter()
                    .enumerate()
                    .map(|(k, &(a, b))| {
                        let r = zv[k] - mu[truth.label(a) * 2 + truth.label(b)];
                        -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + r * r / var)
                    })
                    .sum();
                ll.exp()
            })
            .collect();
        let mean = stats::mean(&lik);
        let se = (stats::sample_variance(&lik) / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "mc {mean} exact {exact} se {se}");
    }

    #[test]
    fn relabeling_does_not_change_likelihood() {
        let z = random_z(5, 8);
        let disp = random_disp(5, 9);
        let model = ArrayModel::new(&z, &disp, &config(0.5, 0.2)).unwrap();
        let p = Partition::from_labels(&[0, 1, 0, 2, 1]);
        // the same clusters listed in a different order
        let blocks = model.block_posterior(&p).unwrap();
        let q = Partition::from_clusters(5, &[vec![3], vec![1, 4], vec![0, 2]]).unwrap();
        assert_eq!(p, q);
        assert!((blocks.log_ml - model.log_marginal_likelihood(&q).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn exact_posterior_normalizes_and_finds_sharp_truth() {
        let truth = Partition::from_labels(&[0, 0, 1, 1, 2]);
        let means = [0.1, 0.9, 0.5, 0.7, 0.2, 0.35, 0.6, 0.45, 0.8];
        let z = block_z(&truth, &means, None);
        let model = ArrayModel::new(&z, &diag_disp(5, 1e-6), &config(0.5, 1.0)).unwrap();
        let post = exact_posterior(&model).unwrap();
        let total: f64 = post.atoms.iter().map(|a| a.1).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert_eq!(post.map_partition(), &truth);
    }

    #[test]
    fn huge_noise_recovers_crp_prior() {
        let z = random_z(5, 10);
        let model = ArrayModel::new(&z, &diag_disp(5, 1e6), &ModelConfig::default()).unwrap();
        let post = exact_posterior(&model).unwrap();
        let tv: f64 = 0.5
            * post.atoms.iter().map(|(p, w)| (w - crp_log_prior(p, 1.0).unwrap().exp()).abs()).sum::<f64>();
        assert!(tv < 0.02, "tv {tv}");
    }

    #[test]
    fn gibbs_two_studies_matches_exact() {
        let z = zmatrix(DMatrix::from_row_slice(2, 2, &[0.0, 0.3, 0.5, 0.0]));
        let model = ArrayModel::new(&z, &diag_disp(2, 0.05), &config(0.4, 0.1)).unwrap();
        let exact = exact_posterior(&model).unwrap().probability(&Partition::one_cluster(2));
        let cfg = ModelConfig { mcmc_iterations: 20_000, burn_in: 100, thin: 1, chains: 1, ..config(0.4, 0.1) };
        let out = gibbs_sample(&model, &cfg, SeedStream::new(1)).unwrap();
        let together = out.samples.iter().filter(|x| x.partition.together(0, 1)).count() as f64 / out.samples.len() as f64;
        assert!((together - exact).abs() < 0.02, "{together} vs {exact}");
    }

    #[test]
    fn gibbs_recovers_prior_under_huge_noise() {
        let z = random_z(4, 11);
        let model = ArrayModel::new(&z, &diag_disp(4, 1e6), &ModelConfig::default()).unwrap();
        let out = gibbs_sample(&model, &ModelConfig::default(), SeedStream::new(2)).unwrap();
        let freq = partition_frequencies(&out.samples);
        let prior: BTreeMap<Partition, f64> = enumerate_partitions(4)
            .unwrap()
            .into_iter()
            .map(|p| {
                let w = crp_log_prior(&p, 1.0).unwrap().exp();
                (p, w)
            })
            .collect();
        let tv = total_variation(&freq, &prior);
        assert!(tv < 0.03, "tv {tv}");
        assert_eq!(out.chain_lengths, vec![2000, 2000]);
    }

    #[test]
    fn gibbs_is_deterministic_per_seed() {
        let z = random_z(4, 12);
        let model = ArrayModel::new(&z, &random_disp(4, 13), &ModelConfig::default()).unwrap();
        let cfg = ModelConfig { mcmc_iterations: 300, burn_in: 100, ..ModelConfig::default() };
        let a = gibbs_sample(&model, &cfg, SeedStream::new(5)).unwrap();
        let b = gibbs_sample(&model, &cfg, SeedStream::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gibbs_visits_every_partition_on_noise() {
        let z = random_z(4, 14);
        let model = ArrayModel::new(&z, &diag_disp(4, 1e3), &ModelConfig::default()).unwrap();
        let cfg = ModelConfig { mcmc_iterations: 50_000, burn_in: 1, thin: 1, chains: 1, ..ModelConfig::default() };
        let out = gibbs_sample(&model, &cfg, SeedStream::new(6)).unwrap();
        assert_eq!(partition_frequencies(&out.samples).len(), 15);
    }

    fn sample(labels: &[usize], mu: &[f64]) -> PosteriorSample {
        PosteriorSample { partition: Partition::from_labels(labels), mu_blocks: mu.to_vec(), log_posterior: 0.0 }
    }

    #[test]
    fn summary_by_hand() {
        let ids: Vec<String> = (0..4).map(|k| format!("s{k}")).collect();
        let draws = vec![
            sample(&[0, 0, 1, 1], &[1.0, 2.0, 3.0, 4.0]),
            sample(&[0, 0, 1, 1], &[3.0, 2.0, 3.0, 6.0]),
            sample(&[0, 0, 0, 0], &[5.0]),
        ];
        let sum = summarize(&draws, 0.8, &ids).unwrap();
        assert_eq!(sum.coclustering[0][1], 1.0);
        assert!((sum.coclustering[0][2] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(sum.coclustering[3][3], 1.0);
        // pair (0,1): draws 1, 3, 5 ; pair (0,2): 2, 2, 5 ; pair (3,2): 6? (C=1,1) -> 4, 6, 5
        assert_eq!(sum.mu_posterior_mean[0][1], Some(3.0));
        assert_eq!(sum.mu_posterior_mean[0][2], Some(3.0));
        assert_eq!(sum.mu_posterior_mean[3][2], Some(5.0));
        assert!(sum.mu_posterior_mean[2][2].is_none());
        let iv = sum.mu_credible[0][1].unwrap();
        // type-7 quantiles of (1, 3, 5) at 0.1 and 0.9
        assert!((iv.lower - 1.4).abs() < 1e-12 && (iv.upper - 4.6).abs() < 1e-12);
        assert_eq!(sum.partition_frequencies[0].labels, Partition::from_labels(&[0, 0, 1, 1]));
        assert!((sum.partition_frequencies[0].frequency - 2.0 / 3.0).abs() < 1e-15);
        let total: f64 = sum.partition_frequencies.iter().map(|f| f.frequency).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(sum.point_estimate, Partition::from_labels(&[0, 0, 1, 1]));
    }

    #[test]
    fn single_sample_summary_is_degenerate() {
        let ids: Vec<String> = (0..3).map(|k| format!("s{k}")).collect();
        let sum = summarize(&[sample(&[0, 1, 0], &[1.0, 2.0, 3.0, 4.0])], 0.8, &ids).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let c = sum.coclustering[a][b];
                assert!(c == 0.0 || c == 1.0);
                assert_eq!(sum.coclustering[a][b], sum.coclustering[b][a]);
                if a != b {
                    let iv = sum.mu_credible[a][b].unwrap();
                    assert_eq!(iv.lower, iv.upper);
                }
            }
        }
    }

    #[test]
    fn interval_contains_mean_when_skewed() {
        let iv = IntervalSummary::from_draws(&[0.0, 0.0, 0.0, 0.0, 100.0], 0.5);
        assert!(iv.lower <= iv.mean && iv.mean <= iv.upper);
    }

    #[test]
    fn predictive_weights_by_hand() {
        let p = Partition::from_labels(&[0, 0, 1]);
        let w = predictive_weights(&p, 1.0);
        assert_eq!(w, vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn predictive_limits() {
        let z = random_z(3, 15);
        let disp = diag_disp(3, 0.1);
        let draws = vec![sample(&[0, 0, 1], &[1.0, 2.0, 3.0, 4.0]); 4000];
        let tiny = ArrayModel::new(&z, &disp, &ModelConfig { alpha: 1e-9, ..config(0.5, 0.2) }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = predict_new_study(&draws, &tiny, 0.8, &mut rng).unwrap();
        assert_eq!(pred.new_cluster_fraction, 0.0);
        let huge = ArrayModel::new(&z, &disp, &ModelConfig { alpha: 1e9, ..config(0.5, 0.2) }).unwrap();
        let pred = predict_new_study(&draws, &huge, 0.8, &mut rng).unwrap();
        let se = (0.2f64 / 4000.0).sqrt();
        for iv in pred.train_on_new.iter().chain(&pred.validate_on_new) {
            assert!((iv.mean - 0.5).abs() < 4.0 * se);
        }
    }

    #[test]
    fn exchangeability_of_exact_summaries() {
        let z = random_z(4, 16);
        let disp = random_disp(4, 17);
        let cfg = config(0.5, 0.3);
        let model = ArrayModel::new(&z, &disp, &cfg).unwrap();
        let post = exact_posterior(&model).unwrap();
        let perm = [2, 0, 3, 1];
        let zp = z.restrict(&perm).unwrap();
        // permute the dispersion consistently with the entry order
        let pairs = pair_order(4);
        let idx: Vec<usize> = pair_order(4)
            .iter()
            .map(|&(a, b)| pairs.iter().position(|&q| q == (perm[a], perm[b])).unwrap())
            .collect();
        let m = disp.matrix();
        let dp = DispersionEstimate::from_covariance(zp.study_ids.clone(), DMatrix::from_fn(12, 12, |r, c| m[(idx[r], idx[c])]))
            .unwrap();
        let model_p = ArrayModel::new(&zp, &dp, &cfg).unwrap();
        let post_p = exact_posterior(&model_p).unwrap();
        let (c, cp) = (post.coclustering(), post_p.coclustering());
        let (mu, mup) = (exact_mu_mean(&model, &post).unwrap(), exact_mu_mean(&model_p, &post_p).unwrap());
        for a in 0..4 {
            for b in 0..4 {
                assert!((cp[(a, b)] - c[(perm[a], perm[b])]).abs() < 1e-10);
                if a != b {
                    assert!((mup[(a, b)] - mu[(perm[a], perm[b])]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn posterior_means_shrink_between_data_and_prior() {
        let z = random_z(4, 18);
        let model = ArrayModel::new(&z, &random_disp(4, 19), &ModelConfig::default()).unwrap();
        let post = exact_posterior(&model).unwrap();
        let mu = exact_mu_mean(&model, &post).unwrap();
        let v = z.vectorize();
        let lo = v.iter().copied().fold(model.m0(), f64::min);
        let hi = v.iter().copied().fold(model.m0(), f64::max);
        for (a, b) in pair_order(4) {
            assert!(mu[(a, b)] >= lo - 1e-9 && mu[(a, b)] <= hi + 1e-9);
        }
    }

    #[test]
    fn exact_draws_follow_the_posterior() {
        let z = random_z(3, 20);
        let model = ArrayModel::new(&z, &random_disp(3, 21), &config(0.5, 0.2)).unwrap();
        let post = exact_posterior(&model).unwrap();
        let draws = sample_exact(&model, &post, 20_000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let tv = total_variation(&partition_frequencies(&draws), &post.as_map());
        assert!(tv < 0.02, "tv {tv}");
    }

    #[test]
    fn prior_cluster_counts_sum_to_one() {
        let d = prior_cluster_counts(5, 1.0, 10_000, &mut ChaCha8Rng::seed_from_u64(0));
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // P(one cluster) = 1/5 for alpha = 1
        assert!((d[0] - 0.2).abs() < 0.02);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { burn_in: 5000, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { thin: 0, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { alpha: -1.0, ..ModelConfig::default() }.validate().is_err());
    }
}
