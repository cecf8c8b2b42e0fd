//! Simulation scenarios, Monte Carlo ground truth and replication
//! experiments.
//!
//! Both scenarios have nine studies in three clusters of three. In the
//! first, clusters differ by measurement error on the covariates; in the
//! second, by label noise on a binary outcome driven by correlated
//! covariates.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arraymodel::{exact_mu_mean, fit_posterior, ArrayModel, ModelConfig};
use crate::bootstrap::{bootstrap_z, estimate_dispersion, BootstrapOptions, DEFAULT_JITTER_FLOOR, DEFAULT_SHRINKAGE};
use crate::clusterstats::estimate_zjbs_curve;
use crate::data::{Outcome, StudyCollection, StudyDataset};
use crate::learners::LearnerSpec;
use crate::metrics::MetricSpec;
use crate::partition::{point_estimate_weighted, transfer_distance, Partition, PointEstimateOptions, MAX_ENUMERATION_SIZE};
use crate::rng::{tag, SeedStream};
use crate::stats;
use crate::zharness::{pair_order, Harness, ZMatrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    One,
    Two,
}

/// Covariate variance in the first scenario.
pub const SCENARIO1_VARIANCE: f64 = 17.0;
/// Label flip probabilities of the three clusters in the second scenario.
pub const SCENARIO2_FLIP_RATES: [f64; 3] = [0.05, 0.25, 0.5];
/// Within-block covariate correlation in the second scenario.
pub const SCENARIO2_CORRELATION: f64 = 0.2;
pub const SCENARIO2_COEFFICIENT: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    /// Multiple of three; clusters are consecutive thirds.
    pub n_studies: usize,
    /// Overrides the scaled per-study sample size.
    pub n_per_study: Option<usize>,
    /// Shrinks sample size and covariate count together.
    pub scale_factor: f64,
    pub seed: u64,
    /// Test hook for the second scenario's flip probabilities.
    pub flip_rates: Option<[f64; 3]>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig { scenario: Scenario::One, n_studies: 9, n_per_study: None, scale_factor: 1.0, seed: 0, flip_rates: None }
    }
}

fn scaled(base: f64, f: f64) -> usize {
    ((base * f).round() as usize).max(1)
}

impl ScenarioConfig {
    pub fn scenario1(scale_factor: f64, seed: u64) -> Self {
        ScenarioConfig { scenario: Scenario::One, scale_factor, seed, ..Self::default() }
    }

    pub fn scenario2(scale_factor: f64, seed: u64) -> Self {
        ScenarioConfig { scenario: Scenario::Two, scale_factor, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_studies == 0 || self.n_studies % 3 != 0 {
            return Err(Error::InvalidArgument("n_studies must be a positive multiple of 3".into()));
        }
        if !(self.scale_factor > 0.0 && self.scale_factor <= 1.0) {
            return Err(Error::InvalidArgument("scale_factor must lie in (0, 1]".into()));
        }
        if self.n_per_study == Some(0) {
            return Err(Error::InvalidArgument("n_per_study must be positive".into()));
        }
        if let Some(r) = self.flip_rates {
            if r.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidArgument("flip rates must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn true_partition(&self) -> Partition {
        let k = self.n_studies / 3;
        Partition::from_labels(&(0..self.n_studies).map(|s| s / k.max(1)).collect::<Vec<_>>())
    }

    /// Cluster (0, 1 or 2) of study `s`.
    pub fn cluster_of(&self, s: usize) -> usize {
        s / (self.n_studies / 3).max(1)
    }

    pub fn n(&self) -> usize {
        self.n_per_study.unwrap_or_else(|| match self.scenario {
            Scenario::One => scaled(300.0, self.scale_factor),
            Scenario::Two => scaled(100.0, self.scale_factor),
        })
    }

    pub fn p(&self) -> usize {
        match self.scenario {
            Scenario::One => scaled(50.0, self.scale_factor),
            Scenario::Two => scaled(540.0, self.scale_factor),
        }
    }

    pub fn study_ids(&self) -> Vec<String> {
        (1..=self.n_studies).map(|k| format!("study{k}")).collect()
    }

    fn feature_names(&self) -> Vec<String> {
        (1..=self.p()).map(|k| format!("x{k}")).collect()
    }
}

/// Generative parameters of a scenario at its configured scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParameters {
    pub n: usize,
    pub p: usize,
    /// `(feature index, coefficient)` of the nonzero coefficients.
    pub coefficients: Vec<(usize, f64)>,
    /// First scenario: number of leading covariates receiving the second
    /// cluster's measurement error.
    pub noisy_covariates: usize,
    /// Second scenario: end (exclusive) of each correlated block.
    pub block_ends: Vec<usize>,
    pub flip_rates: [f64; 3],
}

impl ScenarioParameters {
    pub fn new(config: &ScenarioConfig) -> Self {
        let f = config.scale_factor;
        let (n, p) = (config.n(), config.p());
        match config.scenario {
            Scenario::One => {
                let k = scaled(10.0, f).min(p);
                // signal spread evenly over the covariates, kept at the same
                // signal-to-noise ratio as the full design
                let beta = 0.1 / f.sqrt();
                ScenarioParameters {
                    n,
                    p,
                    coefficients: (0..k).map(|i| (i * p / k, beta)).collect(),
                    noisy_covariates: ((p as f64) / 2.0).round() as usize,
                    block_ends: Vec::new(),
                    flip_rates: [0.0; 3],
                }
            }
            Scenario::Two => {
                let block_ends: Vec<usize> = [100.0, 200.0, 370.0].iter().map(|&b| scaled(b, f).min(p)).collect();
                ScenarioParameters {
                    n,
                    p,
                    coefficients: (0..block_ends[2]).map(|i| (i, SCENARIO2_COEFFICIENT)).collect(),
                    noisy_covariates: 0,
                    block_ends,
                    flip_rates: config.flip_rates.unwrap_or(SCENARIO2_FLIP_RATES),
                }
            }
        }
    }

    fn linear_predictor(&self, x: &DMatrix<f64>, i: usize) -> f64 {
        self.coefficients.iter().map(|&(k, b)| b * x[(i, k)]).sum()
    }
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn scenario1_study<R: Rng + ?Sized>(config: &ScenarioConfig, params: &ScenarioParameters, s: usize, rng: &mut R) -> (DMatrix<f64>, Vec<f64>) {
    let (n, p) = (params.n, params.p);
    let sd = SCENARIO1_VARIANCE.sqrt();
    let mut x = DMatrix::from_fn(n, p, |_, _| 0.0);
    for i in 0..n {
        for k in 0..p {
            x[(i, k)] = sd * normal(rng);
        }
    }
    let y: Vec<f64> = (0..n).map(|i| (rng.random::<f64>() < sigmoid(params.linear_predictor(&x, i))) as u8 as f64).collect();
    // measurement error on the observed covariates only
    match config.cluster_of(s) {
        1 => {
            for i in 0..n {
                for k in 0..params.noisy_covariates {
                    x[(i, k)] += 14.0 * normal(rng);
                }
            }
        }
        2 => {
            for i in 0..n {
                for k in 0..p {
                    x[(i, k)] += 0.33 + 8.0 * normal(rng);
                }
            }
        }
        _ => {}
    }
    (x, y)
}

fn scenario2_study<R: Rng + ?Sized>(config: &ScenarioConfig, params: &ScenarioParameters, s: usize, rng: &mut R) -> (DMatrix<f64>, Vec<f64>) {
    let (n, p) = (params.n, params.p);
    let rho = SCENARIO2_CORRELATION;
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let mut start = 0;
        for &end in &params.block_ends {
            // one shared factor per block gives equicorrelation rho
            let factor = normal(rng);
            for k in start..end {
                x[(i, k)] = rho.sqrt() * factor + (1.0 - rho).sqrt() * normal(rng);
            }
            start = end.max(start);
        }
        for k in start..p {
            x[(i, k)] = normal(rng);
        }
    }
    let rate = params.flip_rates[config.cluster_of(s)];
    let y = (0..n)
        .map(|i| {
            let clean = rng.random::<f64>() < sigmoid(params.linear_predictor(&x, i));
            let flip = rng.random::<f64>() < rate;
            (clean ^ flip) as u8 as f64
        })
        .collect();
    (x, y)
}

/// Study `s` of the scenario, drawn from `rng`.
pub fn generate_study<R: Rng + ?Sized>(config: &ScenarioConfig, s: usize, rng: &mut R) -> Result<StudyDataset> {
    config.validate()?;
    if s >= config.n_studies {
        return Err(Error::InvalidArgument(format!("study index {s} out of range")));
    }
    let params = ScenarioParameters::new(config);
    let (x, y) = match config.scenario {
        Scenario::One => scenario1_study(config, &params, s, rng),
        Scenario::Two => scenario2_study(config, &params, s, rng),
    };
    StudyDataset::new(format!("study{}", s + 1), x, Outcome::Binary(y), config.feature_names())
}

/// All studies, each from its own stream keyed by study index.
pub fn generate_collection(config: &ScenarioConfig, seeds: SeedStream) -> Result<StudyCollection> {
    let studies = (0..config.n_studies)
        .into_par_iter()
        .map(|s| generate_study(config, s, &mut seeds.rng(&[tag::SCENARIO, s as u64])))
        .collect::<Result<Vec<_>>>()?;
    StudyCollection::new(studies)
}

/// All studies from the configured seed.
pub fn generate(config: &ScenarioConfig) -> Result<StudyCollection> {
    generate_collection(config, SeedStream::new(config.seed))
}

pub fn generate_scenario1(config: &ScenarioConfig, seeds: SeedStream) -> Result<StudyCollection> {
    if config.scenario != Scenario::One {
        return Err(Error::InvalidArgument("configuration is not for the first scenario".into()));
    }
    generate_collection(config, seeds)
}

pub fn generate_scenario2(config: &ScenarioConfig, seeds: SeedStream) -> Result<StudyCollection> {
    if config.scenario != Scenario::Two {
        return Err(Error::InvalidArgument("configuration is not for the second scenario".into()));
    }
    generate_collection(config, seeds)
}

/// Monte Carlo expected validation array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub study_ids: Vec<String>,
    /// `None` on the diagonal.
    pub zeta: Vec<Vec<Option<f64>>>,
    pub monte_carlo_se: Vec<Vec<Option<f64>>>,
    pub true_partition: Partition,
    pub mc_reps: usize,
}

impl GroundTruth {
    pub fn zeta(&self, s: usize, v: usize) -> Option<f64> {
        self.zeta[s][v]
    }

    pub fn se(&self, s: usize, v: usize) -> Option<f64> {
        self.monte_carlo_se[s][v]
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    (stats::mean(values), (stats::sample_variance(values) / n).sqrt())
}

/// `zeta[s][v]`: the validation statistic averaged over `mc_reps`
/// regenerations of the whole collection. With `identical_reps` every
/// repetition reuses the first stream.
pub fn true_zeta(
    config: &ScenarioConfig,
    learner: &LearnerSpec,
    metric: &MetricSpec,
    mc_reps: usize,
    seeds: SeedStream,
    identical_reps: bool,
) -> Result<GroundTruth> {
    if mc_reps < 2 {
        return Err(Error::InvalidArgument("at least two Monte Carlo repetitions are needed".into()));
    }
    let arrays = (0..mc_reps)
        .into_par_iter()
        .map(|r| {
            let stream = seeds.child(&[tag::ZETA, if identical_reps { 0 } else { r as u64 }]);
            let data = generate_collection(config, stream)?;
            Harness::new(data, learner.clone(), *metric, stream)?.compute_z()
        })
        .collect::<Result<Vec<ZMatrix>>>()?;
    let s = config.n_studies;
    let mut zeta = vec![vec![None; s]; s];
    let mut se = vec![vec![None; s]; s];
    for (a, b) in pair_order(s) {
        let values: Vec<f64> = arrays.iter().map(|z| z.get(a, b).unwrap()).collect();
        let (m, e) = mean_and_se(&values);
        zeta[a][b] = Some(m);
        se[a][b] = Some(e);
    }
    Ok(GroundTruth { study_ids: config.study_ids(), zeta, monte_carlo_se: se, true_partition: config.true_partition(), mc_reps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZetaCurvePoint {
    pub j: usize,
    pub mean: f64,
    pub se: f64,
}

/// `zeta^j_s`: `Z^j` for study `s` with the true cluster as training pool,
/// averaged over regenerations. Grid points beyond the pool are dropped.
pub fn true_zeta_curve(
    config: &ScenarioConfig,
    learner: &LearnerSpec,
    metric: &MetricSpec,
    s: usize,
    j_grid: &[usize],
    iterations: usize,
    mc_reps: usize,
    seeds: SeedStream,
) -> Result<Vec<ZetaCurvePoint>> {
    if mc_reps < 2 {
        return Err(Error::InvalidArgument("at least two Monte Carlo repetitions are needed".into()));
    }
    let cluster = config.true_partition().cluster_of(s);
    let pool = (cluster.len() - 1) * config.n();
    let grid: Vec<usize> = j_grid.iter().copied().filter(|&j| j > 0 && j <= pool).collect();
    let curves = (0..mc_reps)
        .into_par_iter()
        .map(|r| {
            let stream = seeds.child(&[tag::ZETA, r as u64]);
            let data = generate_collection(config, stream)?;
            let h = Harness::new(data, learner.clone(), *metric, stream)?;
            grid.iter().map(|&j| h.z_subsampled(&cluster, s, j, iterations)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(k, &j)| {
            let values: Vec<f64> = curves.iter().map(|c| c[k]).collect();
            let (mean, se) = mean_and_se(&values);
            ZetaCurvePoint { j, mean, se }
        })
        .collect())
}

/// Shared settings of the stage-two pipeline used by experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub bootstrap: BootstrapOptions,
    pub shrinkage_lambda: f64,
    pub jitter_floor: f64,
    pub model: ModelConfig,
    /// Enumerate partitions; defaults to enumeration up to 10 studies.
    pub exact: Option<bool>,
    /// Test hook: multiply the dispersion estimate by this factor.
    pub dispersion_inflation: Option<f64>,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            bootstrap: BootstrapOptions::default(),
            shrinkage_lambda: DEFAULT_SHRINKAGE,
            jitter_floor: DEFAULT_JITTER_FLOOR,
            model: ModelConfig::default(),
            exact: None,
            dispersion_inflation: None,
        }
    }
}

/// Outcome of the stage-two fit on one array.
struct StageFit {
    z: ZMatrix,
    atoms: Vec<(Partition, f64)>,
    draws: Vec<Partition>,
    /// Posterior mean of the block mean of each ordered pair.
    mu_mean: DMatrix<f64>,
}

fn fit_stage(harness: &Harness, config: &StageConfig) -> Result<StageFit> {
    let z = harness.compute_z()?;
    let reps = bootstrap_z(harness, &config.bootstrap)?;
    let mut disp = estimate_dispersion(&reps, config.shrinkage_lambda, config.jitter_floor)?;
    if let Some(f) = config.dispersion_inflation {
        disp = disp.inflated(f);
    }
    let model = ArrayModel::new(&z, &disp, &config.model)?;
    let exact = config.exact.unwrap_or(z.size() <= MAX_ENUMERATION_SIZE);
    let post = fit_posterior(&model, &config.model, exact, harness.seeds().child(&[tag::PIPELINE]))?;
    let s = z.size();
    let mu_mean = if exact {
        exact_mu_mean(&model, &crate::arraymodel::ExactPosterior { atoms: post.atoms.clone() })?
    } else {
        let n = post.samples.len() as f64;
        DMatrix::from_fn(s, s, |a, b| {
            if a == b { f64::NAN } else { post.samples.iter().map(|x| x.mu_for_pair(a, b)).sum::<f64>() / n }
        })
    };
    Ok(StageFit { draws: post.partitions(), atoms: post.atoms, z, mu_mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplicationConfig {
    pub scenario: ScenarioConfig,
    pub n_replicates: usize,
    pub learner: LearnerSpec,
    pub metric: MetricSpec,
    pub stage: StageConfig,
    /// Monte Carlo repetitions behind the ground truth.
    pub zeta_reps: usize,
}

impl Default for ReplicationConfig {
    fn default() -> Self {
        ReplicationConfig {
            scenario: ScenarioConfig::scenario1(0.5, 0),
            n_replicates: 100,
            learner: LearnerSpec::ridge_logistic(),
            metric: MetricSpec::mae_prob(),
            stage: StageConfig::default(),
            zeta_reps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub distance: usize,
    pub point_estimate: Partition,
    /// Empirical array entries in pair order.
    pub empirical: Vec<f64>,
    /// Posterior mean block means in pair order.
    pub bayes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub train: String,
    pub validate: String,
    pub zeta: f64,
    pub bayes_mse: f64,
    pub empirical_mse: f64,
    pub bayes_mae: f64,
    pub empirical_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub study_ids: Vec<String>,
    pub true_partition: Partition,
    pub n_replicates: usize,
    pub n_failed: usize,
    pub failures: Vec<ReplicateFailure>,
    pub distance_mean: f64,
    pub distance_median: f64,
    /// Quartiles of the distance to the true partition.
    pub distance_quartiles: [f64; 3],
    /// `distance_counts[d]`: replicates at distance `d`.
    pub distance_counts: Vec<usize>,
    pub pairs: Vec<PairSummary>,
    /// Fraction of pairs where the posterior mean has the lower MSE.
    pub bayes_mse_win_fraction: f64,
    pub bayes_mae_win_fraction: f64,
    pub ground_truth: GroundTruth,
    pub records: Vec<ReplicateRecord>,
}

fn run_replicate(config: &ReplicationConfig, seeds: SeedStream, r: usize) -> Result<ReplicateRecord> {
    let stream = seeds.child(&[tag::REPLICATE, r as u64]);
    let data = generate_collection(&config.scenario, stream.child(&[tag::SCENARIO]))?;
    let harness = Harness::new(data, config.learner.clone(), config.metric, stream)?;
    let fit = fit_stage(&harness, &config.stage)?;
    let point = point_estimate_weighted(&fit.atoms, None, PointEstimateOptions::default())?;
    let pairs = pair_order(fit.z.size());
    Ok(ReplicateRecord {
        replicate: r,
        distance: transfer_distance(&point, &config.scenario.true_partition())?,
        point_estimate: point,
        empirical: fit.z.vectorize(),
        bayes: pairs.iter().map(|&(a, b)| fit.mu_mean[(a, b)]).collect(),
    })
}

/// Repeated generate / array / bootstrap / posterior runs scored against
/// the true partition and the Monte Carlo ground truth. Failed replicates
/// are skipped; more than 10% failures abort.
pub fn run_replication(config: &ReplicationConfig, seeds: SeedStream) -> Result<ReplicationReport> {
    config.scenario.validate()?;
    if config.n_replicates == 0 {
        return Err(Error::InvalidArgument("at least one replicate is needed".into()));
    }
    let ground_truth = true_zeta(&config.scenario, &config.learner, &config.metric, config.zeta_reps, seeds, false)?;
    let outcomes: Vec<Result<ReplicateRecord>> =
        (0..config.n_replicates).into_par_iter().map(|r| run_replicate(config, seeds, r)).collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(ReplicateFailure { replicate: r, message: e.to_string() }),
        }
    }
    if failures.len() * 10 > config.n_replicates {
        return Err(Error::Numerical(format!(
            "{} of {} replicates failed; first failure: {}",
            failures.len(),
            config.n_replicates,
            failures[0].message
        )));
    }
    let distances: Vec<f64> = records.iter().map(|r| r.distance as f64).collect();
    let max_d = records.iter().map(|r| r.distance).max().unwrap_or(0);
    let mut distance_counts = vec![0; max_d + 1];
    records.iter().for_each(|r| distance_counts[r.distance] += 1);
    let ids = config.scenario.study_ids();
    let pairs: Vec<PairSummary> = pair_order(config.scenario.n_studies)
        .into_iter()
        .enumerate()
        .map(|(k, (a, b))| {
            let zeta = ground_truth.zeta(a, b).unwrap();
            let err = |f: &dyn Fn(&ReplicateRecord) -> f64| -> (f64, f64) {
                let e: Vec<f64> = records.iter().map(|r| f(r) - zeta).collect();
                (stats::mean(&e.iter().map(|x| x * x).collect::<Vec<_>>()), stats::mean(&e.iter().map(|x| x.abs()).collect::<Vec<_>>()))
            };
            let (bayes_mse, bayes_mae) = err(&|r| r.bayes[k]);
            let (empirical_mse, empirical_mae) = err(&|r| r.empirical[k]);
            PairSummary { train: ids[a].clone(), validate: ids[b].clone(), zeta, bayes_mse, empirical_mse, bayes_mae, empirical_mae }
        })
        .collect();
    let frac = |f: &dyn Fn(&PairSummary) -> bool| pairs.iter().filter(|p| f(p)).count() as f64 / pairs.len() as f64;
    Ok(ReplicationReport {
        study_ids: ids,
        true_partition: config.scenario.true_partition(),
        n_replicates: config.n_replicates,
        n_failed: failures.len(),
        failures,
        distance_mean: stats::mean(&distances),
        distance_median: stats::median(&distances),
        distance_quartiles: [0.25, 0.5, 0.75].map(|q| stats::quantile(&distances, q)),
        distance_counts,
        bayes_mse_win_fraction: frac(&|p| p.bayes_mse < p.empirical_mse),
        bayes_mae_win_fraction: frac(&|p| p.bayes_mae < p.empirical_mae),
        pairs,
        ground_truth,
        records,
    })
}

/// Per-replicate records as CSV: replicate, distance, point estimate and
/// mean absolute error of both estimators against the ground truth.
pub fn write_records_csv(report: &ReplicationReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_record(["replicate", "distance", "point_estimate", "bayes_mae", "empirical_mae"])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in &report.records {
        let (mut bayes, mut emp) = (0.0, 0.0);
        for (k, p) in report.pairs.iter().enumerate() {
            bayes += (r.bayes[k] - p.zeta).abs();
            emp += (r.empirical[k] - p.zeta).abs();
        }
        let n = report.pairs.len() as f64;
        w.write_record([
            r.replicate.to_string(),
            r.distance.to_string(),
            r.point_estimate.to_string(),
            format!("{}", bayes / n),
            format!("{}", emp / n),
        ])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

/// Posterior-averaged `Z^j_{B(s),s}` estimates of several learners on the
/// same replicated data. Defaults are sized for desk runs: 200 bootstrap
/// replicates, 100 posterior draws and 10 subsample fits per curve point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparisonConfig {
    pub scenario: ScenarioConfig,
    pub n_replicates: usize,
    /// The comparison counts how often the first learner is at or below
    /// the second.
    pub learners: Vec<LearnerSpec>,
    pub metric: MetricSpec,
    pub stage: StageConfig,
    pub j_grid: Vec<usize>,
    /// Defaults to the first cluster.
    pub target_studies: Option<Vec<usize>>,
    pub subsample_iterations: usize,
    /// Posterior draws used for the curve averages.
    pub curve_draws: usize,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        ComparisonConfig {
            scenario: ScenarioConfig::scenario2(0.5, 0),
            n_replicates: 50,
            learners: vec![LearnerSpec::ridge_logistic(), LearnerSpec::lasso_logistic()],
            metric: MetricSpec::error_rate(),
            stage: StageConfig {
                bootstrap: BootstrapOptions { replicates: 200, ..BootstrapOptions::default() },
                ..StageConfig::default()
            },
            j_grid: vec![50, 100],
            target_studies: None,
            subsample_iterations: 10,
            curve_draws: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub replicate: usize,
    pub learner: String,
    pub study: String,
    pub j: usize,
    pub estimate: Option<f64>,
    pub conditioning_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinFraction {
    pub study: String,
    pub j: usize,
    /// Replicates where both learners have a defined estimate.
    pub n_defined: usize,
    /// Fraction of those where the first learner is at or below the second.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub learners: Vec<String>,
    pub n_replicates: usize,
    pub n_failed: usize,
    pub failures: Vec<ReplicateFailure>,
    pub records: Vec<ComparisonRecord>,
    pub win_fractions: Vec<WinFraction>,
}

fn compare_replicate(config: &ComparisonConfig, targets: &[usize], seeds: SeedStream, r: usize) -> Result<Vec<ComparisonRecord>> {
    let stream = seeds.child(&[tag::REPLICATE, r as u64]);
    let data = generate_collection(&config.scenario, stream.child(&[tag::SCENARIO]))?;
    let mut out = Vec::new();
    for (l, learner) in config.learners.iter().enumerate() {
        let harness = Harness::new(data.clone(), learner.clone(), config.metric, stream.child(&[l as u64]))?;
        let fit = fit_stage(&harness, &config.stage)?;
        let draws = &fit.draws[..config.curve_draws.min(fit.draws.len())];
        for &s in targets {
            for est in estimate_zjbs_curve(&harness, draws, s, &config.j_grid, config.subsample_iterations)? {
                out.push(ComparisonRecord {
                    replicate: r,
                    learner: learner.name().to_string(),
                    study: est.target_study,
                    j: est.j.unwrap_or_default(),
                    estimate: est.value,
                    conditioning_probability: est.conditioning_probability,
                });
            }
        }
    }
    Ok(out)
}

pub fn compare_learners(config: &ComparisonConfig, seeds: SeedStream) -> Result<ComparisonReport> {
    config.scenario.validate()?;
    if config.learners.len() != 2 {
        return Err(Error::InvalidArgument("the comparison needs exactly two learners".into()));
    }
    if config.n_replicates == 0 || config.curve_draws == 0 {
        return Err(Error::InvalidArgument("replicates and curve draws must be positive".into()));
    }
    let targets = config.target_studies.clone().unwrap_or_else(|| config.scenario.true_partition().cluster_of(0));
    let outcomes: Vec<Result<Vec<ComparisonRecord>>> =
        (0..config.n_replicates).into_par_iter().map(|r| compare_replicate(config, &targets, seeds, r)).collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(rec) => records.extend(rec),
            Err(e) => failures.push(ReplicateFailure { replicate: r, message: e.to_string() }),
        }
    }
    if failures.len() * 10 > config.n_replicates {
        return Err(Error::Numerical(format!(
            "{} of {} replicates failed; first failure: {}",
            failures.len(),
            config.n_replicates,
            failures[0].message
        )));
    }
    let names: Vec<String> = config.learners.iter().map(|l| l.name().to_string()).collect();
    let ids = config.scenario.study_ids();
    let mut win_fractions = Vec::new();
    for &s in &targets {
        for &j in &config.j_grid {
            let find = |r: usize, l: &str| {
                records.iter().find(|c| c.replicate == r && c.learner == l && c.study == ids[s] && c.j == j).and_then(|c| c.estimate)
            };
            let (mut defined, mut wins) = (0usize, 0usize);
            for r in 0..config.n_replicates {
                if let (Some(a), Some(b)) = (find(r, &names[0]), find(r, &names[1])) {
                    defined += 1;
                    wins += (a <= b) as usize;
                }
            }
            win_fractions.push(WinFraction {
                study: ids[s].clone(),
                j,
                n_defined: defined,
                fraction: if defined == 0 { f64::NAN } else { wins as f64 / defined as f64 },
            });
        }
    }
    Ok(ComparisonReport { learners: names, n_replicates: config.n_replicates, n_failed: failures.len(), failures, records, win_fractions })
}
