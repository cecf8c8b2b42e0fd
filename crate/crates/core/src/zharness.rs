//! The leave-one-in array `Z` and its pooled and subsampled variants.
//!
//! `Z[s][v]` is the validation statistic of a model trained on study `s`
//! and evaluated on study `v`; the diagonal is never defined. A [`Harness`]
//! binds a collection to a learner, a metric and a seed stream, and caches
//! tuned penalties, fitted models and subsampled estimates so repeated
//! cluster-statistic queries reuse work.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{combine_indices, effective_members, StudyCollection, StudyDataset};
use crate::learners::{self, Family, FittedModel, LearnerSpec};
use crate::metrics::{self, MetricKind, MetricSpec};
use crate::rng::{key_of, tag, SeedStream};
use crate::{Error, Result};

/// An `S x S` array of validation statistics with an undefined diagonal.
/// Equality ignores the diagonal.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "ZMatrixRepr", try_from = "ZMatrixRepr")]
pub struct ZMatrix {
    pub study_ids: Vec<String>,
    values: DMatrix<f64>,
    pub metric: MetricSpec,
    pub learner: LearnerSpec,
    pub training_size: Option<usize>,
    pub subsample_iterations: Option<usize>,
    /// Studies left out because they had fewer than `training_size` rows.
    pub excluded_studies: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ZMatrixRepr {
    study_ids: Vec<String>,
    metric: MetricSpec,
    learner: LearnerSpec,
    training_size: Option<usize>,
    #[serde(default)]
    subsample_iterations: Option<usize>,
    #[serde(default)]
    excluded_studies: Vec<String>,
    values: Vec<Vec<Option<f64>>>,
}

impl From<ZMatrix> for ZMatrixRepr {
    fn from(z: ZMatrix) -> Self {
        let s = z.size();
        let values = (0..s)
            .map(|r| (0..s).map(|c| (r != c).then(|| z.values[(r, c)])).collect())
            .collect();
        ZMatrixRepr {
            study_ids: z.study_ids,
            metric: z.metric,
            learner: z.learner,
            training_size: z.training_size,
            subsample_iterations: z.subsample_iterations,
            excluded_studies: z.excluded_studies,
            values,
        }
    }
}

impl TryFrom<ZMatrixRepr> for ZMatrix {
    type Error = Error;

    fn try_from(r: ZMatrixRepr) -> Result<Self> {
        let s = r.study_ids.len();
        if r.values.len() != s || r.values.iter().any(|row| row.len() != s) {
            return Err(Error::InvalidData(format!("values must be a {s} x {s} array")));
        }
        let mut values = DMatrix::from_element(s, s, f64::NAN);
        for (a, row) in r.values.iter().enumerate() {
            for (b, cell) in row.iter().enumerate() {
                match (a == b, cell) {
                    (true, _) => {}
                    (false, Some(v)) => values[(a, b)] = *v,
                    (false, None) => {
                        return Err(Error::InvalidData(format!("missing off-diagonal entry ({a}, {b})")))
                    }
                }
            }
        }
        let mut z = ZMatrix::new(r.study_ids, values, r.metric, r.learner)?;
        z.training_size = r.training_size;
        z.subsample_iterations = r.subsample_iterations;
        z.excluded_studies = r.excluded_studies;
        Ok(z)
    }
}

impl PartialEq for ZMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.study_ids == other.study_ids
            && self.vectorize() == other.vectorize()
            && self.metric == other.metric
            && self.learner == other.learner
            && self.training_size == other.training_size
            && self.subsample_iterations == other.subsample_iterations
            && self.excluded_studies == other.excluded_studies
    }
}

impl ZMatrix {
    /// Diagonal entries of `values` are ignored. Off-diagonal entries must
    /// be finite.
    pub fn new(study_ids: Vec<String>, mut values: DMatrix<f64>, metric: MetricSpec, learner: LearnerSpec) -> Result<Self> {
        let s = study_ids.len();
        if s < 2 {
            return Err(Error::Size("a validation array needs at least two studies".into()));
        }
        if values.shape() != (s, s) {
            return Err(Error::DimensionMismatch { expected: s, found: values.nrows() });
        }
        for a in 0..s {
            values[(a, a)] = f64::NAN;
            for b in 0..s {
                if a != b && !values[(a, b)].is_finite() {
                    return Err(Error::Numerical(format!(
                        "entry ({}, {}) is not finite",
                        study_ids[a], study_ids[b]
                    )));
                }
            }
        }
        Ok(ZMatrix {
            study_ids,
            values,
            metric,
            learner,
            training_size: None,
            subsample_iterations: None,
            excluded_studies: Vec::new(),
        })
    }

    pub fn size(&self) -> usize {
        self.study_ids.len()
    }

    /// Number of defined entries, `S (S - 1)`.
    pub fn dim(&self) -> usize {
        let s = self.size();
        s * (s - 1)
    }

    pub fn higher_is_better(&self) -> bool {
        self.metric.higher_is_better()
    }

    /// `None` on the diagonal.
    pub fn get(&self, s: usize, v: usize) -> Option<f64> {
        (s != v).then(|| self.values[(s, v)])
    }

    /// Off-diagonal entries in row-major order.
    pub fn vectorize(&self) -> Vec<f64> {
        pair_order(self.size()).into_iter().map(|(s, v)| self.values[(s, v)]).collect()
    }

    /// Same metadata, new off-diagonal values in row-major order.
    pub fn with_vector(&self, vector: &[f64]) -> Result<ZMatrix> {
        if vector.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: vector.len() });
        }
        let mut out = self.clone();
        for (k, (s, v)) in pair_order(self.size()).into_iter().enumerate() {
            if !vector[k].is_finite() {
                return Err(Error::Numerical(format!("entry {k} is not finite")));
            }
            out.values[(s, v)] = vector[k];
        }
        Ok(out)
    }

    /// Restriction to the studies at `indices`, in that order.
    pub fn restrict(&self, indices: &[usize]) -> Result<ZMatrix> {
        let ids = indices.iter().map(|&i| self.study_ids[i].clone()).collect();
        let values = DMatrix::from_fn(indices.len(), indices.len(), |a, b| self.values[(indices[a], indices[b])]);
        let mut z = ZMatrix::new(ids, values, self.metric, self.learner.clone())?;
        z.training_size = self.training_size;
        z.subsample_iterations = self.subsample_iterations;
        Ok(z)
    }

    /// Dense copy with `NaN` on the diagonal.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// Ordered pairs `(s, v)`, `s != v`, in row-major order: position `k` of a
/// vectorized array.
pub fn pair_order(s: usize) -> Vec<(usize, usize)> {
    (0..s).flat_map(|a| (0..s).filter(move |&b| b != a).map(move |b| (a, b))).collect()
}

/// Position of the pair `(s, v)` in [`pair_order`].
pub fn pair_index(size: usize, s: usize, v: usize) -> usize {
    debug_assert!(s != v && s < size && v < size);
    s * (size - 1) + if v < s { v } else { v - 1 }
}

pub(crate) fn check_compatible(collection: &StudyCollection, learner: &LearnerSpec, metric: &MetricSpec) -> Result<()> {
    use crate::data::OutcomeKind;
    learner.validate()?;
    metric.validate()?;
    let kind = collection.outcome_kind()?;
    let learner_ok = matches!(
        (learner.family, kind),
        (Family::Linear, OutcomeKind::Continuous) | (Family::Logistic, OutcomeKind::Binary)
    );
    if !learner_ok {
        return Err(Error::OutcomeType(format!("learner {} cannot train on {kind:?} outcomes", learner.name())));
    }
    let metric_ok = match metric.kind {
        MetricKind::Mse => matches!(kind, OutcomeKind::Continuous | OutcomeKind::Binary),
        MetricKind::MaeProb | MetricKind::ErrorRate | MetricKind::Auc => kind == OutcomeKind::Binary,
        MetricKind::TruncatedConcordance => kind == OutcomeKind::Survival,
    };
    if !metric_ok {
        return Err(Error::OutcomeType(format!("metric {} is not defined for {kind:?} outcomes", metric.name())));
    }
    if !collection.is_aligned() {
        return Err(Error::Alignment("studies must share one feature list".into()));
    }
    Ok(())
}

/// Score `model` on `study`, optionally with observation weights.
pub(crate) fn score(
    metric: &MetricSpec,
    model: &FittedModel,
    study: &StudyDataset,
    weights: Option<&[f64]>,
) -> Result<f64> {
    let pred = learners::predict(model, study.features())?;
    metrics::evaluate_weighted(metric, &pred, study.outcome(), weights)
}

/// Row subset of a weight vector.
pub(crate) fn select_weights(weights: Option<&[f64]>, rows: &[usize]) -> Option<Vec<f64>> {
    weights.map(|w| rows.iter().map(|&i| w[i]).collect())
}

/// Binds a study collection to a learner, a metric and a seed stream.
///
/// Penalty tuning for a training set happens once and is reused; with
/// `freeze_penalty` (the default) subsample and bootstrap fits reuse the
/// penalty tuned on the full training set instead of retuning.
pub struct Harness {
    collection: StudyCollection,
    learner: LearnerSpec,
    metric: MetricSpec,
    seeds: SeedStream,
    freeze_penalty: bool,
    penalties: Mutex<HashMap<Vec<usize>, f64>>,
    models: Mutex<HashMap<(Vec<usize>, u64), Arc<FittedModel>>>,
    subsampled: Mutex<HashMap<(Vec<usize>, usize, usize, usize), f64>>,
}

impl Harness {
    pub fn new(collection: StudyCollection, learner: LearnerSpec, metric: MetricSpec, seeds: SeedStream) -> Result<Self> {
        check_compatible(&collection, &learner, &metric)?;
        Ok(Harness {
            collection,
            learner,
            metric,
            seeds,
            freeze_penalty: true,
            penalties: Mutex::new(HashMap::new()),
            models: Mutex::new(HashMap::new()),
            subsampled: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_freeze_penalty(mut self, freeze: bool) -> Self {
        self.freeze_penalty = freeze;
        self
    }

    pub fn collection(&self) -> &StudyCollection {
        &self.collection
    }

    pub fn learner(&self) -> &LearnerSpec {
        &self.learner
    }

    pub fn metric(&self) -> &MetricSpec {
        &self.metric
    }

    pub fn seeds(&self) -> SeedStream {
        self.seeds
    }

    pub fn freeze_penalty(&self) -> bool {
        self.freeze_penalty
    }

    fn set_id(&self, members: &[usize]) -> String {
        members.iter().map(|&i| self.collection.study(i).id()).collect::<Vec<_>>().join("+")
    }

    /// Penalty tuned on the pooled studies `members` (sorted, distinct).
    pub fn tuned_penalty(&self, members: &[usize]) -> Result<f64> {
        if let Some(&p) = self.penalties.lock().unwrap().get(members) {
            return Ok(p);
        }
        let train = combine_indices(&self.collection, members, None)?;
        let mut rng = self.seeds.rng(&[tag::TUNE, key_of(members)]);
        let p = learners::tune_penalty(&self.learner, &train, &mut rng)?;
        self.penalties.lock().unwrap().insert(members.to_vec(), p);
        Ok(p)
    }

    /// Model fitted on the pooled studies `members` at their tuned penalty.
    pub fn model_for(&self, members: &[usize]) -> Result<Arc<FittedModel>> {
        let penalty = self.tuned_penalty(members)?;
        let key = (members.to_vec(), penalty.to_bits());
        if let Some(m) = self.models.lock().unwrap().get(&key) {
            return Ok(Arc::clone(m));
        }
        let train = combine_indices(&self.collection, members, None)?;
        let model = Arc::new(learners::fit(&self.learner, &train, penalty)?);
        self.models.lock().unwrap().insert(key, Arc::clone(&model));
        Ok(model)
    }

    /// Penalty for a fit on a derived training set (subsample or bootstrap
    /// resample) of the full training set `members`.
    pub(crate) fn derived_penalty<R: Rng + ?Sized>(
        &self,
        members: &[usize],
        derived: &StudyDataset,
        weights: Option<&[f64]>,
        rng: &mut R,
    ) -> Result<f64> {
        if self.freeze_penalty {
            self.tuned_penalty(members)
        } else {
            learners::tune_penalty_weighted(&self.learner, derived, weights, rng)
        }
    }

    /// The leave-one-in array: train on each study, validate on every other.
    pub fn compute_z(&self) -> Result<ZMatrix> {
        let s = self.collection.len();
        let rows: Vec<Vec<f64>> = (0..s)
            .into_par_iter()
            .map(|a| {
                let model = self.model_for(&[a]).map_err(|e| e.in_cell(self.collection.study(a).id(), "*"))?;
                (0..s)
                    .map(|b| {
                        if a == b {
                            return Ok(f64::NAN);
                        }
                        let (train, test) = (self.collection.study(a), self.collection.study(b));
                        score(&self.metric, &model, test, None).map_err(|e| e.in_cell(train.id(), test.id()))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let values = DMatrix::from_fn(s, s, |a, b| rows[a][b]);
        ZMatrix::new(self.collection.ids(), values, self.metric, self.learner.clone())
    }

    /// `Z^{n0}`: each entry averages `iterations` fits on `n0`-row subsamples
    /// of the training study. Studies with fewer than `n0` rows are dropped.
    pub fn compute_z_adjusted(&self, n0: usize, iterations: usize) -> Result<ZMatrix> {
        let included = threshold_members(&self.collection, n0)?;
        if iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be positive".into()));
        }
        let values = adjusted_array(self, &self.collection, None, &included, n0, iterations, |a, it| {
            self.seeds.rng(&[tag::ADJUSTED, a as u64, it as u64])
        })?;
        let mut z = ZMatrix::new(
            included.iter().map(|&i| self.collection.study(i).id().to_string()).collect(),
            values,
            self.metric,
            self.learner.clone(),
        )?;
        z.training_size = Some(n0);
        z.subsample_iterations = Some(iterations);
        z.excluded_studies = (0..self.collection.len())
            .filter(|i| !included.contains(i))
            .map(|i| self.collection.study(i).id().to_string())
            .collect();
        Ok(z)
    }

    /// `Z_{B,v}`: train on the pooled studies of `members` other than `v`,
    /// validate on `v`.
    pub fn z_combined(&self, members: &[usize], v: usize) -> Result<f64> {
        let eff = effective_members(members, Some(v));
        if eff.is_empty() {
            return Err(Error::DegenerateSet(format!(
                "training set {{{}}} is empty without {}",
                self.set_id(&effective_members(members, None)),
                self.collection.study(v).id()
            )));
        }
        let test = self.collection.study(v);
        let model = self.model_for(&eff).map_err(|e| e.in_cell(&self.set_id(&eff), test.id()))?;
        score(&self.metric, &model, test, None).map_err(|e| e.in_cell(&self.set_id(&eff), test.id()))
    }

    /// [`Harness::z_combined`] addressed by study ids.
    pub fn compute_z_combined(&self, members: &[&str], v: &str) -> Result<f64> {
        let idx = members.iter().map(|id| self.collection.index_of(id)).collect::<Result<Vec<_>>>()?;
        self.z_combined(&idx, self.collection.index_of(v)?)
    }

    /// Number of rows in the pooled studies `members \ {s}`.
    pub fn pool_size(&self, members: &[usize], s: usize) -> usize {
        effective_members(members, Some(s)).iter().map(|&i| self.collection.study(i).n()).sum()
    }

    /// `Z^j_{B,s}`: average over `iterations` fits on `j` rows drawn without
    /// replacement from the pooled rows of `members \ {s}`, validated on `s`.
    pub fn z_subsampled(&self, members: &[usize], s: usize, j: usize, iterations: usize) -> Result<f64> {
        let eff = effective_members(members, Some(s));
        if eff.is_empty() {
            return Err(Error::DegenerateSet(format!(
                "no training studies remain once {} is removed",
                self.collection.study(s).id()
            )));
        }
        if iterations == 0 || j == 0 {
            return Err(Error::InvalidArgument("j and iterations must be positive".into()));
        }
        let pool_n = self.pool_size(&eff, s);
        if pool_n < j {
            return Err(Error::Size(format!("pool of {pool_n} rows cannot supply {j} training rows")));
        }
        let key = (eff.clone(), s, j, iterations);
        if let Some(&v) = self.subsampled.lock().unwrap().get(&key) {
            return Ok(v);
        }
        let pool = combine_indices(&self.collection, &eff, None)?;
        let test = self.collection.study(s);
        let set_id = self.set_id(&eff);
        let total = (0..iterations)
            .into_par_iter()
            .map(|it| {
                let mut rng = self.seeds.rng(&[tag::SUBSAMPLED, key_of(&eff), s as u64, j as u64, it as u64]);
                let mut rows = rand::seq::index::sample(&mut rng, pool_n, j).into_vec();
                rows.sort_unstable();
                let train = pool.select_rows(&rows, pool.id());
                let penalty = self.derived_penalty(&eff, &train, None, &mut rng)?;
                let model = learners::fit(&self.learner, &train, penalty)?;
                score(&self.metric, &model, test, None)
            })
            .collect::<Result<Vec<f64>>>()
            .map_err(|e| e.in_cell(&set_id, test.id()))?
            .into_iter()
            .sum::<f64>();
        let value = total / iterations as f64;
        self.subsampled.lock().unwrap().insert(key, value);
        Ok(value)
    }

    /// [`Harness::z_subsampled`] addressed by study ids.
    pub fn compute_z_subsampled(&self, members: &[&str], s: &str, j: usize, iterations: usize) -> Result<f64> {
        let idx = members.iter().map(|id| self.collection.index_of(id)).collect::<Result<Vec<_>>>()?;
        self.z_subsampled(&idx, self.collection.index_of(s)?, j, iterations)
    }
}

/// Indices of studies with at least `n0` rows; at least two are required.
pub fn threshold_members(collection: &StudyCollection, n0: usize) -> Result<Vec<usize>> {
    if n0 == 0 {
        return Err(Error::InvalidArgument("training size must be positive".into()));
    }
    let included: Vec<usize> = (0..collection.len()).filter(|&i| collection.study(i).n() >= n0).collect();
    if included.len() < 2 {
        return Err(Error::Threshold(format!(
            "only {} studies have at least {n0} rows; two are needed",
            included.len()
        )));
    }
    Ok(included)
}

/// Subsample-averaged array over the studies `included` of `data`, which
/// is either the harness collection or a bootstrap resample of it (same
/// study order). Penalties follow the harness policy.
pub(crate) fn adjusted_array<R: Rng>(
    harness: &Harness,
    data: &StudyCollection,
    weights: Option<&[Vec<f64>]>,
    included: &[usize],
    n0: usize,
    iterations: usize,
    rng_for: impl Fn(usize, usize) -> R + Sync,
) -> Result<DMatrix<f64>> {
    let k = included.len();
    let rows: Vec<Vec<f64>> = included
        .par_iter()
        .map(|&a| {
            let study = data.study(a);
            let mut acc = vec![0.0; k];
            for it in 0..iterations {
                let mut rng = rng_for(a, it);
                let mut rows = rand::seq::index::sample(&mut rng, study.n(), n0).into_vec();
                rows.sort_unstable();
                let train = study.select_rows(&rows, study.id());
                let w = weights.map(|w| select_weights(Some(&w[a]), &rows).unwrap());
                let penalty = harness.derived_penalty(&[a], &train, w.as_deref(), &mut rng)?;
                let model = learners::fit_weighted(&harness.learner, &train, w.as_deref(), penalty)
                    .map_err(|e| e.in_cell(study.id(), "*"))?;
                for (c, &b) in included.iter().enumerate() {
                    if a != b {
                        let test = data.study(b);
                        acc[c] += score(&harness.metric, &model, test, weights.map(|w| w[b].as_slice()))
                            .map_err(|e| e.in_cell(study.id(), test.id()))?;
                    }
                }
            }
            Ok(acc.into_iter().map(|v| v / iterations as f64).collect())
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(k, k, |a, b| if a == b { f64::NAN } else { rows[a][b] }))
}

/// Full array over `data` (same study order as the harness collection),
/// fitting each study at the harness penalty policy.
pub(crate) fn full_array<R: Rng>(
    harness: &Harness,
    data: &StudyCollection,
    weights: Option<&[Vec<f64>]>,
    rng_for: impl Fn(usize) -> R + Sync,
) -> Result<DMatrix<f64>> {
    let s = data.len();
    let rows: Vec<Vec<f64>> = (0..s)
        .into_par_iter()
        .map(|a| {
            let train = data.study(a);
            let w = weights.map(|w| w[a].as_slice());
            let mut rng = rng_for(a);
            let penalty = harness.derived_penalty(&[a], train, w, &mut rng)?;
            let model = learners::fit_weighted(&harness.learner, train, w, penalty)
                .map_err(|e| e.in_cell(train.id(), "*"))?;
            (0..s)
                .map(|b| {
                    if a == b {
                        return Ok(f64::NAN);
                    }
                    let test = data.study(b);
                    score(&harness.metric, &model, test, weights.map(|w| w[b].as_slice()))
                        .map_err(|e| e.in_cell(train.id(), test.id()))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(s, s, |a, b| rows[a][b]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Outcome;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("x{j}")).collect()
    }

    fn linear_study(id: &str, n: usize, slope: f64, rng: &mut ChaCha8Rng) -> StudyDataset {
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = (0..n).map(|i| slope * x[(i, 0)] - x[(i, 1)] + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        StudyDataset::new(id, x, Outcome::Continuous(y), names(2)).unwrap()
    }

    fn linear_collection(sizes: &[usize], seed: u64) -> StudyCollection {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let studies = sizes
            .iter()
            .enumerate()
            .map(|(k, &n)| linear_study(&format!("s{}", k + 1), n, 1.0 + k as f64, &mut rng))
            .collect();
        StudyCollection::new(studies).unwrap()
    }

    fn ols_harness(c: StudyCollection) -> Harness {
        Harness::new(c, LearnerSpec::ols(), MetricSpec::mse(), SeedStream::new(7)).unwrap()
    }

    /// Least squares with intercept via the normal equations.
    fn ols_oracle(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
        let n = x.nrows();
        let mut d = DMatrix::from_element(n, x.ncols() + 1, 1.0);
        d.view_mut((0, 1), (n, x.ncols())).copy_from(x);
        let yv = nalgebra::DVector::from_column_slice(y);
        let beta = (d.transpose() * &d).try_inverse().unwrap() * d.transpose() * yv;
        beta.iter().copied().collect()
    }

    fn oracle_mse(beta: &[f64], test: &StudyDataset) -> f64 {
        let y = test.outcome().response().unwrap();
        let x = test.features();
        (0..test.n())
            .map(|i| {
                let pred = beta[0] + (0..x.ncols()).map(|j| beta[j + 1] * x[(i, j)]).sum::<f64>();
                (y[i] - pred).powi(2)
            })
            .sum::<f64>()
            / test.n() as f64
    }

    #[test]
    fn two_studies_give_two_entries() {
        let z = ols_harness(linear_collection(&[10, 12], 1)).compute_z().unwrap();
        assert_eq!(z.dim(), 2);
        assert!(z.get(0, 0).is_none() && z.get(0, 1).is_some() && z.get(1, 0).is_some());
        assert_eq!(z.vectorize().len(), 2);
    }

    #[test]
    fn ols_array_matches_scripted_oracle() {
        let c = linear_collection(&[8, 9, 10], 2);
        let z = ols_harness(c.clone()).compute_z().unwrap();
        for a in 0..3 {
            let s = c.study(a);
            let beta = ols_oracle(s.features(), s.outcome().response().unwrap());
            for b in 0..3 {
                if a != b {
                    let want = oracle_mse(&beta, c.study(b));
                    assert!((z.get(a, b).unwrap() - want).abs() < 1e-10 * want.max(1.0));
                }
            }
        }
    }

    #[test]
    fn identical_studies_give_equal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = linear_study("a", 30, 2.0, &mut rng);
        let copies = ["a", "b", "c", "d"].iter().map(|id| base.select_rows(&(0..30).collect::<Vec<_>>(), *id)).collect();
        let c = StudyCollection::new(copies).unwrap();
        let h = Harness::new(c, LearnerSpec::ridge_linear(), MetricSpec::mse(), SeedStream::new(1)).unwrap();
        let z = h.compute_z().unwrap();
        for a in 0..4 {
            let row: Vec<f64> = (0..4).filter(|&b| b != a).map(|b| z.get(a, b).unwrap()).collect();
            assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn order_of_studies_permutes_the_array() {
        let c = linear_collection(&[10, 11, 12], 4);
        let z = ols_harness(c.clone()).compute_z().unwrap();
        let perm = [2, 0, 1];
        let permuted = c.subset(&perm).unwrap();
        let zp = ols_harness(permuted).compute_z().unwrap();
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    assert_eq!(zp.get(a, b), z.get(perm[a], perm[b]));
                }
            }
        }
    }

    #[test]
    fn json_has_null_diagonal_and_round_trips() {
        let z = ols_harness(linear_collection(&[6, 7], 5)).compute_z().unwrap();
        let text = serde_json::to_string(&z).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["values"][0][0].is_null() && v["values"][1][0].is_number());
        assert!(v["training_size"].is_null());
        let back: ZMatrix = serde_json::from_str(&text).unwrap();
        assert_eq!(back, z);
    }

    #[test]
    fn pair_index_inverts_pair_order() {
        for s in 2..6 {
            for (k, (a, b)) in pair_order(s).into_iter().enumerate() {
                assert_eq!(pair_index(s, a, b), k);
            }
        }
    }

    #[test]
    fn full_subsample_matches_full_array() {
        let c = linear_collection(&[10, 10, 10], 6);
        let h = ols_harness(c);
        let z = h.compute_z().unwrap();
        let za = h.compute_z_adjusted(10, 1).unwrap();
        for (u, v) in z.vectorize().iter().zip(za.vectorize()) {
            assert!((u - v).abs() < 1e-10);
        }
        assert_eq!(za.training_size, Some(10));
    }

    #[test]
    fn threshold_drops_small_studies() {
        let sizes = [120, 120, 120, 120, 120, 120, 50, 50, 50];
        let c = linear_collection(&sizes, 7);
        let h = ols_harness(c);
        let z = h.compute_z_adjusted(110, 1).unwrap();
        assert_eq!(z.size(), 6);
        assert_eq!(z.excluded_studies, vec!["s7", "s8", "s9"]);
        assert!(matches!(h.compute_z_adjusted(121, 1), Err(Error::Threshold(_))));
    }

    #[test]
    fn more_iterations_reduce_monte_carlo_variance() {
        let c = linear_collection(&[40, 40], 8);
        let spread = |iterations: usize| {
            let vals: Vec<f64> = (0..50)
                .map(|seed| {
                    let h = Harness::new(c.clone(), LearnerSpec::ols(), MetricSpec::mse(), SeedStream::new(seed))
                        .unwrap();
                    h.compute_z_adjusted(12, iterations).unwrap().get(0, 1).unwrap()
                })
                .collect();
            crate::stats::sample_variance(&vals)
        };
        let ratio = spread(200) / spread(1);
        assert!(ratio < 0.1, "variance ratio {ratio}");
    }

    #[test]
    fn combined_singleton_and_exclusion() {
        let c = linear_collection(&[10, 12, 14], 9);
        let h = ols_harness(c.clone());
        let z = h.compute_z().unwrap();
        assert_eq!(h.z_combined(&[0], 1).unwrap(), z.get(0, 1).unwrap());
        assert_eq!(h.z_combined(&[0, 1], 1).unwrap(), z.get(0, 1).unwrap());
        assert!(matches!(h.z_combined(&[1], 1), Err(Error::DegenerateSet(_))));
        assert_eq!(h.compute_z_combined(&["s1", "s2"], "s2").unwrap(), z.get(0, 1).unwrap());
    }

    #[test]
    fn combined_matches_pooled_oracle() {
        let c = linear_collection(&[10, 12, 14], 10);
        let h = ols_harness(c.clone());
        let got = h.z_combined(&[0, 1, 2], 1).unwrap();
        let (s1, s3) = (c.study(0), c.study(2));
        let x = DMatrix::from_fn(24, 2, |i, j| if i < 10 { s1.features()[(i, j)] } else { s3.features()[(i - 10, j)] });
        let y: Vec<f64> = s1.outcome().response().unwrap().iter().chain(s3.outcome().response().unwrap()).copied().collect();
        let want = oracle_mse(&ols_oracle(&x, &y), c.study(1));
        assert!((got - want).abs() < 1e-10);
        // concatenation order does not matter
        assert_eq!(h.z_combined(&[2, 1, 0], 1).unwrap(), got);
    }

    #[test]
    fn exhaustive_subsample_equals_combined() {
        let c = linear_collection(&[10, 12, 14], 11);
        let h = Harness::new(c, LearnerSpec::ridge_linear(), MetricSpec::mse(), SeedStream::new(2)).unwrap();
        let full = h.z_combined(&[0, 1, 2], 0).unwrap();
        let sub = h.z_subsampled(&[0, 1, 2], 0, 26, 3).unwrap();
        assert!((full - sub).abs() < 1e-12);
        assert!(matches!(h.z_subsampled(&[0, 1, 2], 0, 27, 3), Err(Error::Size(_))));
    }

    #[test]
    fn subsample_from_single_other_study() {
        let c = linear_collection(&[10, 12], 12);
        let h = ols_harness(c);
        let a = h.z_subsampled(&[0, 1], 0, 12, 1).unwrap();
        assert!((a - h.compute_z().unwrap().get(1, 0).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let c = linear_collection(&[20, 20, 20], 13);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let h = Harness::new(c.clone(), LearnerSpec::ridge_linear(), MetricSpec::mse(), SeedStream::new(3))
                    .unwrap()
                    .with_freeze_penalty(false);
                let mut v = h.compute_z().unwrap().vectorize();
                v.extend(h.compute_z_adjusted(15, 4).unwrap().vectorize());
                v.push(h.z_subsampled(&[0, 1, 2], 1, 25, 5).unwrap());
                v
            })
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn incompatible_metric_is_rejected() {
        let c = linear_collection(&[5, 5], 14);
        let err = Harness::new(c, LearnerSpec::ols(), MetricSpec::auc(), SeedStream::new(0)).err().unwrap();
        assert!(matches!(err, Error::OutcomeType(_)));
    }
}
