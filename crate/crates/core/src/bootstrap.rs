//! Bootstrap replicates of `Z` and the dispersion estimate built from them.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::StudyCollection;
use crate::learners::LearnerSpec;
use crate::metrics::MetricSpec;
use crate::rng::tag;
use crate::stats;
use crate::zharness::{adjusted_array, full_array, pair_order, threshold_members, Harness, ZMatrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    /// Resample rows with replacement within each study.
    Frequentist,
    /// Reweight rows by normalized unit-rate exponential weights.
    Bayesian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub mode: BootstrapMode,
    /// When set, every replicate recomputes the subsample-averaged array at
    /// this training size.
    pub training_size: Option<usize>,
    pub subsample_iterations: usize,
    /// Test hook: Bayesian weights all equal to one.
    #[serde(default)]
    pub uniform_weights: bool,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            replicates: 1000,
            mode: BootstrapMode::Frequentist,
            training_size: None,
            subsample_iterations: 1,
            uniform_weights: false,
        }
    }
}

/// Vectorized bootstrap replicates of a validation array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZReplicateSet {
    pub study_ids: Vec<String>,
    pub metric: MetricSpec,
    pub learner: LearnerSpec,
    pub mode: BootstrapMode,
    pub master_seed: u64,
    pub training_size: Option<usize>,
    /// One row-major off-diagonal vector per replicate.
    pub replicates: Vec<Vec<f64>>,
}

impl ZReplicateSet {
    pub fn len(&self) -> usize {
        self.replicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicates.is_empty()
    }

    pub fn dim(&self) -> usize {
        let s = self.study_ids.len();
        s * (s - 1)
    }
}

fn draw_resample<R: Rng>(collection: &StudyCollection, rng: &mut R) -> StudyCollection {
    let studies = collection
        .studies()
        .iter()
        .map(|s| {
            let rows: Vec<usize> = (0..s.n()).map(|_| rng.random_range(0..s.n())).collect();
            s.select_rows(&rows, s.id())
        })
        .collect();
    collection.with_studies(studies)
}

fn draw_weights<R: Rng>(collection: &StudyCollection, uniform: bool, rng: &mut R) -> Vec<Vec<f64>> {
    collection
        .studies()
        .iter()
        .map(|s| {
            let raw: Vec<f64> = if uniform { vec![1.0; s.n()] } else { (0..s.n()).map(|_| Exp1.sample(rng)).collect() };
            // normalized to mean one within the study
            let scale = s.n() as f64 / raw.iter().sum::<f64>();
            raw.into_iter().map(|w| w * scale).collect()
        })
        .collect()
}

fn one_replicate(harness: &Harness, opts: &BootstrapOptions, included: Option<&[usize]>, b: usize) -> Result<Vec<f64>> {
    let seeds = harness.seeds();
    let base = harness.collection();
    let mut last = None;
    for attempt in 0..2u64 {
        let path = [tag::BOOTSTRAP, b as u64, attempt];
        let mut rng = seeds.rng(&path);
        let (data, weights) = match opts.mode {
            BootstrapMode::Frequentist => (draw_resample(base, &mut rng), None),
            BootstrapMode::Bayesian => (base.clone(), Some(draw_weights(base, opts.uniform_weights, &mut rng))),
        };
        let values = match (included, opts.training_size) {
            (Some(inc), Some(n0)) => adjusted_array(harness, &data, weights.as_deref(), inc, n0, opts.subsample_iterations, |a, it| {
                seeds.rng(&[tag::BOOTSTRAP, b as u64, attempt, tag::ADJUSTED, a as u64, it as u64])
            }),
            _ => full_array(harness, &data, weights.as_deref(), |a| {
                seeds.rng(&[tag::BOOTSTRAP, b as u64, attempt, tag::TUNE, a as u64])
            }),
        };
        match values {
            Ok(m) => {
                let s = m.nrows();
                return Ok(pair_order(s).into_iter().map(|(a, c)| m[(a, c)]).collect());
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap())
}

/// Bootstrap replicates of the harness array (or of the subsample-averaged
/// array when `training_size` is set).
pub fn bootstrap_z(harness: &Harness, opts: &BootstrapOptions) -> Result<ZReplicateSet> {
    if opts.replicates < 2 {
        return Err(Error::InvalidArgument("at least two bootstrap replicates are needed".into()));
    }
    if opts.mode == BootstrapMode::Bayesian && !harness.learner().supports_weights() {
        return Err(Error::Capability(format!("learner {} cannot fit weighted data", harness.learner().name())));
    }
    let collection = harness.collection();
    let included = match opts.training_size {
        Some(n0) => {
            if opts.subsample_iterations == 0 {
                return Err(Error::InvalidArgument("subsample iterations must be positive".into()));
            }
            Some(threshold_members(collection, n0)?)
        }
        None => None,
    };
    let study_ids = match &included {
        Some(inc) => inc.iter().map(|&i| collection.study(i).id().to_string()).collect(),
        None => collection.ids(),
    };
    let replicates = (0..opts.replicates)
        .into_par_iter()
        .map(|b| one_replicate(harness, opts, included.as_deref(), b))
        .collect::<Result<Vec<_>>>()?;
    Ok(ZReplicateSet {
        study_ids,
        metric: *harness.metric(),
        learner: harness.learner().clone(),
        mode: opts.mode,
        master_seed: harness.seeds().master(),
        training_size: opts.training_size,
        replicates,
    })
}

/// Regularized covariance of the vectorized array entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionEstimate {
    pub study_ids: Vec<String>,
    /// `index_map[k] = (s, v)`: matrix position `k` holds entry `Z[s][v]`.
    pub index_map: Vec<(usize, usize)>,
    pub covariance: Vec<Vec<f64>>,
    pub shrinkage_lambda: f64,
    pub jitter: f64,
}

impl DispersionEstimate {
    /// Wraps a given covariance, checking symmetry and positive
    /// definiteness.
    pub fn from_covariance(study_ids: Vec<String>, covariance: DMatrix<f64>) -> Result<Self> {
        let s = study_ids.len();
        let d = s * (s.max(1) - 1);
        if covariance.shape() != (d, d) {
            return Err(Error::DimensionMismatch { expected: d, found: covariance.nrows() });
        }
        let est = DispersionEstimate {
            study_ids,
            index_map: pair_order(s),
            covariance: (0..d).map(|r| covariance.row(r).iter().copied().collect()).collect(),
            shrinkage_lambda: 0.0,
            jitter: 0.0,
        };
        est.check()?;
        Ok(est)
    }

    pub fn dim(&self) -> usize {
        self.index_map.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |r, c| self.covariance[r][c])
    }

    /// Symmetry and a strictly positive smallest eigenvalue.
    pub fn check(&self) -> Result<()> {
        let m = self.matrix();
        let d = self.dim();
        for r in 0..d {
            for c in 0..r {
                if (m[(r, c)] - m[(c, r)]).abs() > 1e-12 * (m[(r, r)].abs() + m[(c, c)].abs()).max(f64::MIN_POSITIVE) {
                    return Err(Error::Numerical("dispersion matrix is not symmetric".into()));
                }
            }
        }
        if min_eigenvalue(&m) <= 0.0 {
            return Err(Error::Numerical("dispersion matrix is not positive definite".into()));
        }
        Ok(())
    }

    /// Same estimate scaled by `factor` (noise-inflation hook).
    pub fn inflated(&self, factor: f64) -> DispersionEstimate {
        let mut out = self.clone();
        out.covariance.iter_mut().flatten().for_each(|v| *v *= factor);
        out
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    m.clone().symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Smallest eigenvalue a dispersion estimate is allowed to have.
pub const MIN_EIGENVALUE: f64 = 1e-10;
pub const DEFAULT_SHRINKAGE: f64 = 0.1;
pub const DEFAULT_JITTER_FLOOR: f64 = 1e-8;

/// Sample covariance of the replicates, shrunk toward its diagonal as
/// `(1 - lambda) C + lambda diag(C)`, then lifted by the smallest jitter in
/// `{0, floor, 10 floor, ...}` that brings the smallest eigenvalue to at
/// least [`MIN_EIGENVALUE`].
pub fn estimate_dispersion(reps: &ZReplicateSet, shrinkage_lambda: f64, jitter_floor: f64) -> Result<DispersionEstimate> {
    if !(0.0..=1.0).contains(&shrinkage_lambda) {
        return Err(Error::InvalidArgument("shrinkage lambda must lie in [0, 1]".into()));
    }
    if !(jitter_floor > 0.0 && jitter_floor.is_finite()) {
        return Err(Error::InvalidArgument("jitter floor must be positive".into()));
    }
    let b = reps.len();
    if b < 2 {
        return Err(Error::InvalidArgument("at least two replicates are needed".into()));
    }
    let d = reps.dim();
    for (k, r) in reps.replicates.iter().enumerate() {
        if r.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: r.len() });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("bootstrap replicate {k} has non-finite entries")));
        }
    }
    let mean: Vec<f64> = (0..d).map(|k| reps.replicates.iter().map(|r| r[k]).sum::<f64>() / b as f64).collect();
    let centered = DMatrix::from_fn(b, d, |i, k| reps.replicates[i][k] - mean[k]);
    let mut cov = centered.transpose() * &centered / (b - 1) as f64;
    for r in 0..d {
        for c in 0..d {
            if r != c {
                cov[(r, c)] *= 1.0 - shrinkage_lambda;
            }
        }
    }
    let cov = cov.clone() * 0.5 + cov.transpose() * 0.5;
    let mut jitter = 0.0;
    let mut lifted = cov.clone();
    while min_eigenvalue(&lifted) < MIN_EIGENVALUE {
        jitter = if jitter == 0.0 { jitter_floor } else { jitter * 10.0 };
        if !jitter.is_finite() {
            return Err(Error::Numerical("no finite jitter makes the dispersion positive definite".into()));
        }
        lifted = cov.clone() + DMatrix::identity(d, d) * jitter;
    }
    let mut est = DispersionEstimate::from_covariance(reps.study_ids.clone(), lifted)?;
    est.shrinkage_lambda = shrinkage_lambda;
    est.jitter = jitter;
    Ok(est)
}

/// Normality summary of one array entry across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryDiagnostic {
    pub train: String,
    pub validate: String,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// Kolmogorov-Smirnov distance to the normal with matching moments.
    pub ks_distance: f64,
    pub skewness_flag: bool,
}

pub const SKEWNESS_FLAG: f64 = 0.5;

pub fn normality_diagnostics(reps: &ZReplicateSet) -> Result<Vec<EntryDiagnostic>> {
    if reps.len() < 100 {
        return Err(Error::InvalidArgument("normality diagnostics need at least 100 replicates".into()));
    }
    let pairs = pair_order(reps.study_ids.len());
    pairs
        .iter()
        .enumerate()
        .map(|(k, &(s, v))| {
            let mut xs: Vec<f64> = reps.replicates.iter().map(|r| r[k]).collect();
            let (skewness, excess_kurtosis) = stats::skewness_kurtosis(&xs);
            xs.sort_by(f64::total_cmp);
            let m = stats::mean(&xs);
            let sd = stats::sample_variance(&xs).sqrt();
            let ks_distance = if sd > 0.0 {
                let normal = Normal::new(m, sd).map_err(|e| Error::Numerical(e.to_string()))?;
                let n = xs.len() as f64;
                xs.iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let f = normal.cdf(x);
                        (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
                    })
                    .fold(0.0, f64::max)
            } else {
                0.0
            };
            Ok(EntryDiagnostic {
                train: reps.study_ids[s].clone(),
                validate: reps.study_ids[v].clone(),
                skewness,
                excess_kurtosis,
                ks_distance,
                skewness_flag: skewness.abs() > SKEWNESS_FLAG,
            })
        })
        .collect()
}

/// Replicate `k` as a full validation array with the metadata of `base`.
pub fn replicate_matrix(reps: &ZReplicateSet, base: &ZMatrix, k: usize) -> Result<ZMatrix> {
    base.with_vector(&reps.replicates[k])
}
