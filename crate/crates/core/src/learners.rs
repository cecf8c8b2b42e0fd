//! Penalized linear and logistic regression with cross-validated penalty
//! selection.
//!
//! All penalized fits work on internally standardized features (weighted
//! mean 0, weighted variance 1 on the training set) and report coefficients
//! on the original scale. The objectives are
//!
//! ```text
//! linear:   (1/2W) sum_i w_i (y_i - b0 - x_i b)^2 + pen(b)
//! logistic: (1/W)  sum_i w_i [log(1 + exp(eta_i)) - y_i eta_i] + pen(b)
//! ridge:    pen(b) = lambda/2 |b|^2        lasso: pen(b) = lambda |b|_1
//! ```
//!
//! with `W = sum_i w_i` and the intercept unpenalized. Ridge problems with
//! more features than rows are solved in the row space of the standardized
//! design, which leaves the solution unchanged.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Outcome, StudyDataset};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Linear,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    None,
    Ridge,
    Lasso,
}

/// Learning algorithm: model family, penalty type and tuning controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub family: Family,
    pub penalty: Penalty,
    pub penalty_grid: Vec<f64>,
    pub cv_folds: usize,
    pub max_iterations: usize,
    pub convergence_tol: f64,
}

/// 20 log-spaced values over `[1e-3, 1e3]`.
pub fn default_penalty_grid() -> Vec<f64> {
    (0..20).map(|k| 10f64.powf(-3.0 + 6.0 * k as f64 / 19.0)).collect()
}

impl LearnerSpec {
    fn with(family: Family, penalty: Penalty) -> Self {
        LearnerSpec {
            family,
            penalty,
            penalty_grid: if penalty == Penalty::None { Vec::new() } else { default_penalty_grid() },
            cv_folds: 5,
            max_iterations: 200,
            convergence_tol: 1e-8,
        }
    }

    pub fn ols() -> Self {
        Self::with(Family::Linear, Penalty::None)
    }

    pub fn ridge_linear() -> Self {
        Self::with(Family::Linear, Penalty::Ridge)
    }

    pub fn ridge_logistic() -> Self {
        Self::with(Family::Logistic, Penalty::Ridge)
    }

    pub fn lasso_logistic() -> Self {
        Self::with(Family::Logistic, Penalty::Lasso)
    }

    /// Learner by config name: `ols`, `ridge_linear`, `ridge_logistic`,
    /// `lasso_logistic` (plus `lasso_linear` and `logistic`).
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "ols" => Self::ols(),
            "ridge_linear" => Self::ridge_linear(),
            "ridge_logistic" => Self::ridge_logistic(),
            "lasso_logistic" => Self::lasso_logistic(),
            "lasso_linear" => Self::with(Family::Linear, Penalty::Lasso),
            "logistic" => Self::with(Family::Logistic, Penalty::None),
            other => return Err(Error::InvalidArgument(format!("unknown learner `{other}`"))),
        })
    }

    pub fn name(&self) -> String {
        match (self.family, self.penalty) {
            (Family::Linear, Penalty::None) => "ols".into(),
            (Family::Linear, Penalty::Ridge) => "ridge_linear".into(),
            (Family::Linear, Penalty::Lasso) => "lasso_linear".into(),
            (Family::Logistic, Penalty::None) => "logistic".into(),
            (Family::Logistic, Penalty::Ridge) => "ridge_logistic".into(),
            (Family::Logistic, Penalty::Lasso) => "lasso_logistic".into(),
        }
    }

    /// Every built-in learner accepts observation weights.
    pub fn supports_weights(&self) -> bool {
        true
    }

    pub fn validate(&self) -> Result<()> {
        if self.penalty != Penalty::None && self.penalty_grid.is_empty() {
            return Err(Error::InvalidArgument("penalty grid is empty".into()));
        }
        if self.penalty_grid.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
            return Err(Error::InvalidArgument("penalty grid values must be positive".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidArgument("convergence tolerance must be positive".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::InvalidArgument("cv_folds must be at least 2".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// A fitted prediction rule on the original feature scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub family: Family,
    pub chosen_penalty: f64,
}

impl FittedModel {
    /// Linear predictor `intercept + X b`.
    pub fn linear_score(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        if features.ncols() != self.coefficients.len() {
            return Err(Error::DimensionMismatch { expected: self.coefficients.len(), found: features.ncols() });
        }
        let beta = DVector::from_column_slice(&self.coefficients);
        Ok((features * beta).iter().map(|v| v + self.intercept).collect())
    }
}

const PROB_FLOOR: f64 = 1e-16;

fn sigmoid(t: f64) -> f64 {
    let p = if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Linear models return `intercept + X b`; logistic models return
/// probabilities strictly inside (0, 1).
pub fn predict(model: &FittedModel, features: &DMatrix<f64>) -> Result<Vec<f64>> {
    let score = model.linear_score(features)?;
    Ok(match model.family {
        Family::Linear => score,
        Family::Logistic => score.into_iter().map(sigmoid).collect(),
    })
}

fn response_for(spec: &LearnerSpec, train: &StudyDataset) -> Result<Vec<f64>> {
    match (spec.family, train.outcome()) {
        (Family::Linear, Outcome::Continuous(y)) => Ok(y.clone()),
        (Family::Logistic, Outcome::Binary(y)) => Ok(y.clone()),
        (family, outcome) => Err(Error::OutcomeType(format!(
            "{family:?} learner cannot train on {:?} outcomes",
            outcome.kind()
        ))),
    }
}

fn normalized_weights(n: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0; n]),
        Some(w) => {
            if w.len() != n {
                return Err(Error::DimensionMismatch { expected: n, found: w.len() });
            }
            if w.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
                return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
            }
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                return Err(Error::InvalidArgument("weights sum to zero".into()));
            }
            let scale = n as f64 / total;
            Ok(w.iter().map(|v| v * scale).collect())
        }
    }
}

/// Standardized training design. Weights are normalized to mean one.
struct Prepared {
    /// Standardized non-constant columns, possibly rotated into row space.
    x: DMatrix<f64>,
    /// Original indices of the non-constant columns.
    keep: Vec<usize>,
    center: Vec<f64>,
    scale: Vec<f64>,
    /// `x = standardized * basis` when a row-space reduction is active.
    basis: Option<DMatrix<f64>>,
    y: Vec<f64>,
    w: Vec<f64>,
    p: usize,
}

impl Prepared {
    fn new(train: &StudyDataset, y: Vec<f64>, w: Vec<f64>, reduce: bool) -> Prepared {
        let x = train.features();
        let (n, p) = x.shape();
        let nf = n as f64;
        let mut keep = Vec::new();
        let mut center = Vec::new();
        let mut scale = Vec::new();
        for j in 0..p {
            let col = x.column(j);
            let m = col.iter().zip(&w).map(|(v, wi)| v * wi).sum::<f64>() / nf;
            let var = col.iter().zip(&w).map(|(v, wi)| wi * (v - m).powi(2)).sum::<f64>() / nf;
            let sd = var.sqrt();
            if sd > 1e-12 * (1.0 + m.abs()) {
                keep.push(j);
                center.push(m);
                scale.push(sd);
            }
        }
        let mut xs = DMatrix::zeros(n, keep.len());
        for (k, &j) in keep.iter().enumerate() {
            for i in 0..n {
                xs[(i, k)] = (x[(i, j)] - center[k]) / scale[k];
            }
        }
        let mut basis = None;
        if reduce && keep.len() > n {
            let svd = xs.clone().svd(true, true);
            let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
            let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
            let rank: Vec<usize> =
                (0..svd.singular_values.len()).filter(|&k| svd.singular_values[k] > 1e-10 * smax).collect();
            let mut z = DMatrix::zeros(n, rank.len());
            let mut v = DMatrix::zeros(keep.len(), rank.len());
            for (c, &k) in rank.iter().enumerate() {
                let s = svd.singular_values[k];
                z.set_column(c, &(u.column(k) * s));
                v.set_column(c, &vt.row(k).transpose());
            }
            xs = z;
            basis = Some(v);
        }
        Prepared { x: xs, keep, center, scale, basis, y, w, p }
    }

    fn n(&self) -> usize {
        self.x.nrows()
    }

    fn q(&self) -> usize {
        self.x.ncols()
    }

    fn into_model(&self, params: &Params, family: Family, penalty: f64) -> FittedModel {
        let beta_std = match &self.basis {
            Some(v) => v * DVector::from_column_slice(&params.beta),
            None => DVector::from_column_slice(&params.beta),
        };
        let mut coefficients = vec![0.0; self.p];
        let mut intercept = params.intercept;
        for (k, &j) in self.keep.iter().enumerate() {
            let b = beta_std[k] / self.scale[k];
            coefficients[j] = b;
            intercept -= b * self.center[k];
        }
        FittedModel { intercept, coefficients, family, chosen_penalty: penalty }
    }
}

#[derive(Debug, Clone)]
struct Params {
    intercept: f64,
    beta: Vec<f64>,
}

fn weighted_mean(v: &[f64], w: &[f64]) -> f64 {
    v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>()
}

fn solve_linear_ridge(d: &Prepared, lambda: f64) -> Result<Params> {
    let (n, q) = (d.n(), d.q());
    let nf = n as f64;
    let ybar = weighted_mean(&d.y, &d.w);
    if q == 0 {
        return Ok(Params { intercept: ybar, beta: Vec::new() });
    }
    // A = diag(sqrt(w)) X / sqrt(n),  r = diag(sqrt(w)) (y - ybar) / sqrt(n)
    let mut a = d.x.clone();
    let mut r = DVector::zeros(n);
    for i in 0..n {
        let s = (d.w[i] / nf).sqrt();
        a.row_mut(i).scale_mut(s);
        r[i] = s * (d.y[i] - ybar);
    }
    let beta = if q <= n || lambda == 0.0 {
        if lambda == 0.0 && q >= n {
            return Err(Error::Singular(format!("{q} features with intercept need more than {n} rows")));
        }
        let mut gram = a.transpose() * &a;
        for k in 0..q {
            gram[(k, k)] += lambda;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Singular("normal equations are not positive definite".into()))?;
        if lambda == 0.0 {
            let diag = chol.l_dirty().diagonal();
            let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            if lo < 1e-7 * hi {
                return Err(Error::Singular("design is rank deficient".into()));
            }
        }
        chol.solve(&(a.transpose() * &r))
    } else {
        let mut gram = &a * a.transpose();
        for k in 0..n {
            gram[(k, k)] += lambda;
        }
        let chol = gram.cholesky().ok_or_else(|| Error::Singular("dual system is not positive definite".into()))?;
        a.transpose() * chol.solve(&r)
    };
    // Weighted centering makes the intercept the weighted response mean.
    Ok(Params { intercept: ybar, beta: beta.iter().copied().collect() })
}

fn logistic_objective(d: &Prepared, eta: &[f64], beta: &[f64], lambda: f64, lasso: bool) -> f64 {
    let nf = d.n() as f64;
    let loss = eta
        .iter()
        .zip(&d.y)
        .zip(&d.w)
        .map(|((&e, &y), &w)| w * (softplus(e) - y * e))
        .sum::<f64>()
        / nf;
    let pen = if lasso {
        lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    } else {
        0.5 * lambda * beta.iter().map(|b| b * b).sum::<f64>()
    };
    loss + pen
}

fn linear_predictor(d: &Prepared, intercept: f64, beta: &[f64]) -> Vec<f64> {
    let mut eta = vec![intercept; d.n()];
    for (k, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            for (e, x) in eta.iter_mut().zip(d.x.column(k).iter()) {
                *e += b * x;
            }
        }
    }
    eta
}

fn initial_logistic(d: &Prepared) -> Params {
    let ybar = weighted_mean(&d.y, &d.w).clamp(1e-6, 1.0 - 1e-6);
    Params { intercept: (ybar / (1.0 - ybar)).ln(), beta: vec![0.0; d.q()] }
}

const SEPARATION_NORM: f64 = 1e4;

/// Penalized Newton iterations (IRLS) with step halving; the objective is
/// non-increasing across accepted steps.
fn solve_logistic_ridge(spec: &LearnerSpec, d: &Prepared, lambda: f64, warm: Option<&Params>) -> Result<Params> {
    let (n, q) = (d.n(), d.q());
    let nf = n as f64;
    let mut params = warm.cloned().unwrap_or_else(|| initial_logistic(d));
    let mut eta = linear_predictor(d, params.intercept, &params.beta);
    let mut obj = logistic_objective(d, &eta, &params.beta, lambda, false);
    let mut trace = Vec::new();
    for _ in 0..spec.max_iterations {
        let prob: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let dim = q + 1;
        let mut grad = DVector::zeros(dim);
        let mut xw = DMatrix::zeros(n, dim);
        for i in 0..n {
            let resid = d.w[i] * (prob[i] - d.y[i]) / nf;
            let curv = (d.w[i] * prob[i] * (1.0 - prob[i]) / nf).sqrt();
            grad[0] += resid;
            xw[(i, 0)] = curv;
            for k in 0..q {
                let x = d.x[(i, k)];
                grad[k + 1] += resid * x;
                xw[(i, k + 1)] = curv * x;
            }
        }
        let mut hess = xw.transpose() * &xw;
        for k in 0..q {
            grad[k + 1] += lambda * params.beta[k];
            hess[(k + 1, k + 1)] += lambda;
        }
        let step = match hess.clone().cholesky() {
            Some(chol) => chol.solve(&grad),
            None => hess
                .lu()
                .solve(&grad)
                .ok_or_else(|| Error::Singular("logistic Hessian is singular".into()))?,
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = Params {
                intercept: params.intercept - t * step[0],
                beta: params.beta.iter().enumerate().map(|(k, b)| b - t * step[k + 1]).collect(),
            };
            let cand_eta = linear_predictor(d, cand.intercept, &cand.beta);
            let cand_obj = logistic_objective(d, &cand_eta, &cand.beta, lambda, false);
            if cand_obj <= obj + 1e-14 * obj.abs() {
                accepted = Some((cand, cand_eta, cand_obj));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cand_eta, cand_obj)) = accepted else {
            // No descent direction left: we are at numerical optimum.
            return Ok(params);
        };
        let change = std::iter::once((cand.intercept - params.intercept).abs())
            .chain(cand.beta.iter().zip(&params.beta).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        trace.push(change);
        params = cand;
        eta = cand_eta;
        obj = cand_obj;
        if lambda == 0.0 && params.beta.iter().map(|b| b * b).sum::<f64>().sqrt() > SEPARATION_NORM {
            return Err(Error::Separable("unpenalized coefficients diverge".into()));
        }
        if change < spec.convergence_tol {
            return Ok(params);
        }
    }
    if lambda == 0.0 {
        return Err(Error::Separable("unpenalized logistic fit did not converge".into()));
    }
    Err(Error::Convergence { iterations: spec.max_iterations, trace })
}

fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

const MAX_CD_PASSES: usize = 100_000;

/// Weighted lasso by cyclic coordinate descent on the quadratic objective
/// `(1/2n) sum_i v_i (z_i - b0 - x_i b)^2 + lambda |b|_1`. The residual
/// vector `resid = z - b0 - X b` is updated in place. Passes alternate
/// between the nonzero coordinates and a full sweep that confirms
/// convergence.
fn lasso_cd(d: &Prepared, v: &[f64], resid: &mut [f64], params: &mut Params, lambda: f64, tol: f64) -> Result<()> {
    let nf = d.n() as f64;
    let vsum: f64 = v.iter().sum();
    let curv: Vec<f64> = (0..d.q())
        .map(|k| d.x.column(k).iter().zip(v).map(|(x, w)| w * x * x).sum::<f64>() / nf)
        .collect();
    let all: Vec<usize> = (0..d.q()).filter(|&k| curv[k] > 0.0).collect();
    let pass = |coords: &[usize], params: &mut Params, resid: &mut [f64]| -> f64 {
        let mut change: f64 = 0.0;
        let shift = resid.iter().zip(v).map(|(r, w)| r * w).sum::<f64>() / vsum;
        if shift != 0.0 {
            params.intercept += shift;
            resid.iter_mut().for_each(|r| *r -= shift);
            change = change.max(shift.abs());
        }
        for &k in coords {
            let col = d.x.column(k);
            let old = params.beta[k];
            let rho = col.iter().zip(resid.iter()).zip(v).map(|((x, r), w)| w * x * r).sum::<f64>() / nf
                + curv[k] * old;
            let new = soft_threshold(rho, lambda) / curv[k];
            if new != old {
                let delta = new - old;
                for (r, x) in resid.iter_mut().zip(col.iter()) {
                    *r -= delta * x;
                }
                params.beta[k] = new;
                change = change.max(delta.abs());
            }
        }
        change
    };
    let mut trace = Vec::new();
    let mut passes = 0;
    while passes < MAX_CD_PASSES {
        let change = pass(&all, params, resid);
        passes += 1;
        trace.push(change);
        if change < tol {
            return Ok(());
        }
        let active: Vec<usize> = all.iter().copied().filter(|&k| params.beta[k] != 0.0).collect();
        while passes < MAX_CD_PASSES {
            let change = pass(&active, params, resid);
            passes += 1;
            if change < tol {
                break;
            }
        }
    }
    Err(Error::Convergence { iterations: MAX_CD_PASSES, trace })
}

fn solve_linear_lasso(spec: &LearnerSpec, d: &Prepared, lambda: f64, warm: Option<&Params>) -> Result<Params> {
    let mut params = warm.cloned().unwrap_or(Params { intercept: weighted_mean(&d.y, &d.w), beta: vec![0.0; d.q()] });
    let eta = linear_predictor(d, params.intercept, &params.beta);
    let mut resid: Vec<f64> = d.y.iter().zip(&eta).map(|(y, e)| y - e).collect();
    lasso_cd(d, &d.w, &mut resid, &mut params, lambda, spec.convergence_tol * 1e-2)?;
    Ok(params)
}

/// Proximal Newton: quadratic approximation of the log-likelihood solved by
/// coordinate descent, with backtracking on the exact objective.
fn solve_logistic_lasso(spec: &LearnerSpec, d: &Prepared, lambda: f64, warm: Option<&Params>) -> Result<Params> {
    let n = d.n();
    let mut params = warm.cloned().unwrap_or_else(|| initial_logistic(d));
    let mut eta = linear_predictor(d, params.intercept, &params.beta);
    let mut obj = logistic_objective(d, &eta, &params.beta, lambda, true);
    let mut trace = Vec::new();
    // inexact inner solves early on, tightened to the floor before
    // convergence is accepted
    let floor = (spec.convergence_tol * 1e-2).max(1e-15);
    let mut inner_tol = floor.max(1e-3);
    for _ in 0..spec.max_iterations {
        let mut v = vec![0.0; n];
        let mut resid = vec![0.0; n];
        for i in 0..n {
            let p = sigmoid(eta[i]);
            let c = (p * (1.0 - p)).max(1e-10);
            v[i] = d.w[i] * c;
            // working response minus current linear predictor
            resid[i] = (d.y[i] - p) / c;
        }
        let mut cand = params.clone();
        lasso_cd(d, &v, &mut resid, &mut cand, lambda, inner_tol)?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = Params {
                intercept: params.intercept + t * (cand.intercept - params.intercept),
                beta: params.beta.iter().zip(&cand.beta).map(|(a, b)| a + t * (b - a)).collect(),
            };
            let trial_eta = linear_predictor(d, trial.intercept, &trial.beta);
            let trial_obj = logistic_objective(d, &trial_eta, &trial.beta, lambda, true);
            if trial_obj <= obj + 1e-14 * obj.abs() {
                accepted = Some((trial, trial_eta, trial_obj));
                break;
            }
            t *= 0.5;
        }
        let Some((next, next_eta, next_obj)) = accepted else {
            if inner_tol > floor {
                inner_tol = floor;
                continue;
            }
            return Ok(params);
        };
        let change = std::iter::once((next.intercept - params.intercept).abs())
            .chain(next.beta.iter().zip(&params.beta).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        trace.push(change);
        params = next;
        eta = next_eta;
        obj = next_obj;
        if change < spec.convergence_tol && inner_tol <= floor {
            return Ok(params);
        }
        inner_tol = floor.max((0.1 * change).min(inner_tol));
    }
    Err(Error::Convergence { iterations: spec.max_iterations, trace })
}

fn solve(spec: &LearnerSpec, d: &Prepared, lambda: f64, warm: Option<&Params>) -> Result<Params> {
    match (spec.family, spec.penalty) {
        (Family::Linear, Penalty::None) | (Family::Linear, Penalty::Ridge) => solve_linear_ridge(d, lambda),
        (Family::Linear, Penalty::Lasso) => solve_linear_lasso(spec, d, lambda, warm),
        (Family::Logistic, Penalty::None) | (Family::Logistic, Penalty::Ridge) => {
            solve_logistic_ridge(spec, d, lambda, warm)
        }
        (Family::Logistic, Penalty::Lasso) => solve_logistic_lasso(spec, d, lambda, warm),
    }
}

fn prepare(spec: &LearnerSpec, train: &StudyDataset, weights: Option<&[f64]>) -> Result<Prepared> {
    spec.validate()?;
    let y = response_for(spec, train)?;
    let w = normalized_weights(train.n(), weights)?;
    let d = Prepared::new(train, y, w, spec.penalty == Penalty::Ridge);
    if spec.penalty == Penalty::None && d.keep.len() < train.p() {
        return Err(Error::Singular("a constant feature is collinear with the intercept".into()));
    }
    Ok(d)
}

fn effective_penalty(spec: &LearnerSpec, penalty_value: f64) -> Result<f64> {
    if spec.penalty == Penalty::None {
        return Ok(0.0);
    }
    if !(penalty_value.is_finite() && penalty_value >= 0.0) {
        return Err(Error::InvalidArgument(format!("penalty {penalty_value} must be finite and non-negative")));
    }
    Ok(penalty_value)
}

/// Fit at a fixed penalty value (ignored when the learner is unpenalized).
pub fn fit(spec: &LearnerSpec, train: &StudyDataset, penalty_value: f64) -> Result<FittedModel> {
    fit_weighted(spec, train, None, penalty_value)
}

/// Fit with per-observation weights multiplying the loss terms.
pub fn fit_weighted(
    spec: &LearnerSpec,
    train: &StudyDataset,
    weights: Option<&[f64]>,
    penalty_value: f64,
) -> Result<FittedModel> {
    let lambda = effective_penalty(spec, penalty_value)?;
    let d = prepare(spec, train, weights)?;
    let params = solve(spec, &d, lambda, None)?;
    Ok(d.into_model(&params, spec.family, lambda))
}

/// Fits along `penalties` in decreasing order with warm starts. Failed
/// fits are reported per penalty.
fn fit_path(spec: &LearnerSpec, d: &Prepared, penalties: &[f64]) -> Vec<(f64, Result<FittedModel>)> {
    let mut order: Vec<f64> = penalties.to_vec();
    order.sort_by(|a, b| b.total_cmp(a));
    let mut warm: Option<Params> = None;
    order
        .into_iter()
        .map(|lambda| {
            let res = solve(spec, d, lambda, warm.as_ref());
            let model = res.map(|p| {
                let m = d.into_model(&p, spec.family, lambda);
                warm = Some(p);
                m
            });
            (lambda, model)
        })
        .collect()
}

fn held_out_loss(family: Family, model: &FittedModel, test: &StudyDataset, w: &[f64]) -> Result<f64> {
    let pred = predict(model, test.features())?;
    let y = test.outcome().response().expect("checked by response_for");
    let total: f64 = w.iter().sum();
    let loss = match family {
        Family::Linear => pred.iter().zip(y).zip(w).map(|((p, y), w)| w * (y - p).powi(2)).sum::<f64>(),
        Family::Logistic => pred
            .iter()
            .zip(y)
            .zip(w)
            .map(|((&p, &y), w)| -w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>(),
    };
    Ok(loss / total)
}

fn assign_folds<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut fold = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

fn folds_have_both_classes(y: &[f64], fold: &[usize], k: usize) -> bool {
    (0..k).all(|f| {
        let mut seen = [false; 2];
        for (i, &yi) in y.iter().enumerate() {
            if fold[i] != f {
                seen[(yi == 1.0) as usize] = true;
            }
        }
        seen[0] && seen[1]
    })
}

/// Penalty from the grid minimizing mean held-out loss over random CV
/// folds (squared error or log-loss); ties go to the larger penalty.
pub fn tune_penalty<R: Rng + ?Sized>(spec: &LearnerSpec, train: &StudyDataset, rng: &mut R) -> Result<f64> {
    tune_penalty_weighted(spec, train, None, rng)
}

pub fn tune_penalty_weighted<R: Rng + ?Sized>(
    spec: &LearnerSpec,
    train: &StudyDataset,
    weights: Option<&[f64]>,
    rng: &mut R,
) -> Result<f64> {
    spec.validate()?;
    if spec.penalty == Penalty::None {
        return Ok(0.0);
    }
    if spec.penalty_grid.len() == 1 {
        return Ok(spec.penalty_grid[0]);
    }
    let n = train.n();
    let k = spec.cv_folds;
    if n < k {
        return Err(Error::Size(format!("{n} rows cannot be split into {k} folds")));
    }
    let y = response_for(spec, train)?;
    let w = normalized_weights(n, weights)?;
    let mut fold = assign_folds(n, k, rng);
    if spec.family == Family::Logistic && !folds_have_both_classes(&y, &fold, k) {
        fold = assign_folds(n, k, rng);
        if !folds_have_both_classes(&y, &fold, k) {
            return Err(Error::InvalidData(format!(
                "a cross-validation training fold of study {} has a single outcome class",
                train.id()
            )));
        }
    }

    let grid = &spec.penalty_grid;
    let mut total = vec![0.0; grid.len()];
    for f in 0..k {
        let tr: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
        let te: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
        let train_f = train.select_rows(&tr, train.id());
        let test_f = train.select_rows(&te, train.id());
        let w_tr: Vec<f64> = tr.iter().map(|&i| w[i]).collect();
        let w_te: Vec<f64> = te.iter().map(|&i| w[i]).collect();
        if w_te.iter().sum::<f64>() <= 0.0 {
            continue;
        }
        let d = Prepared::new(&train_f, tr.iter().map(|&i| y[i]).collect(), w_tr, spec.penalty == Penalty::Ridge);
        for (lambda, model) in fit_path(spec, &d, grid) {
            let g = grid.iter().position(|&v| v == lambda).unwrap();
            total[g] += match model {
                Ok(m) => held_out_loss(spec.family, &m, &test_f, &w_te)?,
                Err(_) => f64::INFINITY,
            };
        }
    }
    let best = total.iter().copied().fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::Numerical(format!("no penalty in the grid could be fitted on study {}", train.id())));
    }
    let tol = 1e-12 * best.abs().max(f64::MIN_POSITIVE);
    Ok(grid
        .iter()
        .zip(&total)
        .filter(|(_, &l)| l <= best + tol)
        .map(|(&g, _)| g)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Tune on `train`, then fit on all of it at the chosen penalty.
pub fn tune_and_fit<R: Rng + ?Sized>(spec: &LearnerSpec, train: &StudyDataset, rng: &mut R) -> Result<FittedModel> {
    let lambda = tune_penalty(spec, train, rng)?;
    fit(spec, train, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("x{j}")).collect()
    }

    fn gaussian(n: usize, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng))
    }

    fn linear_study(x: DMatrix<f64>, y: Vec<f64>) -> StudyDataset {
        let p = x.ncols();
        StudyDataset::new("lin", x, Outcome::Continuous(y), names(p)).unwrap()
    }

    fn logistic_study(x: DMatrix<f64>, y: Vec<f64>) -> StudyDataset {
        let p = x.ncols();
        StudyDataset::new("log", x, Outcome::Binary(y), names(p)).unwrap()
    }

    #[test]
    fn ols_recovers_exact_linear_relation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(10, 2, &mut rng);
        let y: Vec<f64> = (0..10).map(|i| 2.0 * x[(i, 0)] - x[(i, 1)]).collect();
        let m = fit(&LearnerSpec::ols(), &linear_study(x, y), 0.0).unwrap();
        assert!((m.coefficients[0] - 2.0).abs() < 1e-8);
        assert!((m.coefficients[1] + 1.0).abs() < 1e-8);
        assert!(m.intercept.abs() < 1e-8);
    }

    #[test]
    fn ols_with_too_few_rows_is_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(3, 3, &mut rng);
        let err = fit(&LearnerSpec::ols(), &linear_study(x, vec![1.0, 2.0, 3.0]), 0.0).unwrap_err();
        assert!(matches!(err, Error::Singular(_)), "{err}");
    }

    #[test]
    fn huge_ridge_penalty_shrinks_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian(30, 4, &mut rng);
        let y: Vec<f64> = (0..30).map(|i| x[(i, 0)] + 0.5 * x[(i, 2)]).collect();
        let m = fit(&LearnerSpec::ridge_linear(), &linear_study(x.clone(), y.clone()), 1e8).unwrap();
        assert!(m.coefficients.iter().all(|c| c.abs() < 1e-3));
        let yb: Vec<f64> = y.iter().map(|&v| (v > 0.0) as u8 as f64).collect();
        let m = fit(&LearnerSpec::ridge_logistic(), &logistic_study(x, yb), 1e8).unwrap();
        assert!(m.coefficients.iter().all(|c| c.abs() < 1e-3));
    }

    /// Independent dense solve of the standardized normal equations.
    fn ridge_oracle(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> (f64, Vec<f64>) {
        let (n, p) = x.shape();
        let nf = n as f64;
        let means: Vec<f64> = (0..p).map(|j| x.column(j).sum() / nf).collect();
        let sds: Vec<f64> = (0..p)
            .map(|j| (x.column(j).iter().map(|v| (v - means[j]).powi(2)).sum::<f64>() / nf).sqrt())
            .collect();
        let xs = DMatrix::from_fn(n, p, |i, j| (x[(i, j)] - means[j]) / sds[j]);
        let ybar = y.iter().sum::<f64>() / nf;
        let yc = DVector::from_iterator(n, y.iter().map(|v| v - ybar));
        let lhs = xs.transpose() * &xs + DMatrix::identity(p, p) * (nf * lambda);
        let b = lhs.try_inverse().unwrap() * xs.transpose() * yc;
        let coef: Vec<f64> = (0..p).map(|j| b[j] / sds[j]).collect();
        let intercept = ybar - (0..p).map(|j| coef[j] * means[j]).sum::<f64>();
        (intercept, coef)
    }

    #[test]
    fn ridge_linear_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian(6, 3, &mut rng);
        let y: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
        for lambda in [0.01, 0.7, 30.0] {
            let m = fit(&LearnerSpec::ridge_linear(), &linear_study(x.clone(), y.clone()), lambda).unwrap();
            let (b0, b) = ridge_oracle(&x, &y, lambda);
            assert!((m.intercept - b0).abs() < 1e-8);
            for (got, want) in m.coefficients.iter().zip(&b) {
                assert!((got - want).abs() < 1e-8, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn ridge_linear_wide_design_uses_dual_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(5, 9, &mut rng);
        let y: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m = fit(&LearnerSpec::ridge_linear(), &linear_study(x.clone(), y.clone()), 0.3).unwrap();
        let (b0, b) = ridge_oracle(&x, &y, 0.3);
        assert!((m.intercept - b0).abs() < 1e-8);
        for (got, want) in m.coefficients.iter().zip(&b) {
            assert!((got - want).abs() < 1e-8);
        }
    }

    fn ridge_objective(x: &DMatrix<f64>, y: &[f64], lambda: f64, b0: f64, coef: &[f64]) -> f64 {
        // objective in standardized coordinates, evaluated from original-scale coefficients
        let (n, p) = x.shape();
        let nf = n as f64;
        let sds: Vec<f64> = (0..p)
            .map(|j| {
                let m = x.column(j).sum() / nf;
                (x.column(j).iter().map(|v| (v - m).powi(2)).sum::<f64>() / nf).sqrt()
            })
            .collect();
        let rss: f64 = (0..n)
            .map(|i| {
                let pred = b0 + (0..p).map(|j| coef[j] * x[(i, j)]).sum::<f64>();
                (y[i] - pred).powi(2)
            })
            .sum();
        rss / (2.0 * nf) + 0.5 * lambda * (0..p).map(|j| (coef[j] * sds[j]).powi(2)).sum::<f64>()
    }

    #[test]
    fn ridge_linear_is_the_unique_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = gaussian(20, 3, &mut rng);
        let y: Vec<f64> = (0..20).map(|i| x[(i, 1)] + rng.sample::<f64, _>(StandardNormal) * 0.3).collect();
        let lambda = 0.2;
        let m = fit(&LearnerSpec::ridge_linear(), &linear_study(x.clone(), y.clone()), lambda).unwrap();
        let base = ridge_objective(&x, &y, lambda, m.intercept, &m.coefficients);
        for j in 0..3 {
            for delta in [1e-3, -1e-3] {
                let mut c = m.coefficients.clone();
                c[j] += delta;
                assert!(ridge_objective(&x, &y, lambda, m.intercept, &c) > base);
            }
        }
        for delta in [1e-3, -1e-3] {
            assert!(ridge_objective(&x, &y, lambda, m.intercept + delta, &m.coefficients) > base);
        }
    }

    #[test]
    fn logistic_prediction_matches_hand_computation() {
        let model = FittedModel { intercept: 0.5, coefficients: vec![1.0, -2.0], family: Family::Logistic, chosen_penalty: 0.0 };
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -1.0, 2.0]);
        let p = predict(&model, &x).unwrap();
        // scores: 0.5 + 1 - 1 = 0.5 ; 0.5 - 1 - 4 = -4.5
        assert!((p[0] - 1.0 / (1.0 + (-0.5f64).exp())).abs() < 1e-12);
        assert!((p[1] - 1.0 / (1.0 + 4.5f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn trivial_predictions() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let zero = FittedModel { intercept: 0.0, coefficients: vec![0.0; 2], family: Family::Logistic, chosen_penalty: 0.0 };
        assert!(predict(&zero, &x).unwrap().iter().all(|&p| p == 0.5));
        let three = FittedModel { intercept: 3.0, coefficients: vec![0.0; 2], family: Family::Linear, chosen_penalty: 0.0 };
        assert!(predict(&three, &x).unwrap().iter().all(|&p| p == 3.0));
        let bad = DMatrix::zeros(2, 3);
        assert!(matches!(predict(&three, &bad), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn separable_unpenalized_logistic_is_refused() {
        let x = DMatrix::from_column_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let y = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let spec = LearnerSpec::from_name("logistic").unwrap();
        let err = fit(&spec, &logistic_study(x.clone(), y.clone()), 0.0).unwrap_err();
        assert!(matches!(err, Error::Separable(_)), "{err}");
        // ridge still has a solution
        assert!(fit(&LearnerSpec::ridge_logistic(), &logistic_study(x, y), 0.01).is_ok());
    }

    #[test]
    fn outcome_kind_must_match_family() {
        let x = DMatrix::zeros(4, 1);
        let s = linear_study(x, vec![0.1, 0.2, 0.3, 0.4]);
        assert!(matches!(fit(&LearnerSpec::ridge_logistic(), &s, 1.0), Err(Error::OutcomeType(_))));
    }

    /// Penalized negative log-likelihood in standardized coordinates.
    fn penalized_nll(d: &Prepared, p: &Params, lambda: f64) -> f64 {
        let eta = linear_predictor(d, p.intercept, &p.beta);
        logistic_objective(d, &eta, &p.beta, lambda, false)
    }

    #[test]
    fn irls_objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = gaussian(60, 5, &mut rng);
        let y: Vec<f64> = (0..60)
            .map(|i| (rng.random::<f64>() < sigmoid(2.0 * x[(i, 0)] - x[(i, 3)])) as u8 as f64)
            .collect();
        let study = logistic_study(x, y.clone());
        let spec = LearnerSpec { max_iterations: 1, ..LearnerSpec::ridge_logistic() };
        let d = Prepared::new(&study, y, vec![1.0; 60], true);
        let lambda = 0.05;
        let mut params = initial_logistic(&d);
        let mut prev = penalized_nll(&d, &params, lambda);
        for _ in 0..15 {
            params = match solve_logistic_ridge(&spec, &d, lambda, Some(&params)) {
                Ok(p) => p,
                Err(Error::Convergence { .. }) => continue,
                Err(e) => panic!("{e}"),
            };
            // one Newton step per call
            let cur = penalized_nll(&d, &params, lambda);
            assert!(cur <= prev + 1e-14);
            prev = cur;
        }
    }

    #[test]
    fn wide_ridge_logistic_matches_full_space_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = gaussian(15, 30, &mut rng);
        let y: Vec<f64> = (0..15).map(|i| (x[(i, 0)] + x[(i, 1)] > 0.0) as u8 as f64).collect();
        let study = logistic_study(x, y.clone());
        let reduced = Prepared::new(&study, y.clone(), vec![1.0; 15], true);
        let full = Prepared::new(&study, y, vec![1.0; 15], false);
        assert!(reduced.basis.is_some() && full.basis.is_none());
        let spec = LearnerSpec::ridge_logistic();
        let a = reduced.into_model(&solve(&spec, &reduced, 0.5, None).unwrap(), Family::Logistic, 0.5);
        let b = full.into_model(&solve(&spec, &full, 0.5, None).unwrap(), Family::Logistic, 0.5);
        assert!((a.intercept - b.intercept).abs() < 1e-7);
        for (u, v) in a.coefficients.iter().zip(&b.coefficients) {
            assert!((u - v).abs() < 1e-7);
        }
    }

    /// Subgradient conditions of the standardized lasso problem.
    fn lasso_kkt_violation(study: &StudyDataset, model: &FittedModel, lambda: f64) -> f64 {
        let x = study.features();
        let y = study.outcome().response().unwrap();
        let (n, p) = x.shape();
        let nf = n as f64;
        let prob = predict(model, x).unwrap();
        let mut worst: f64 = (prob.iter().zip(y).map(|(p, y)| p - y).sum::<f64>() / nf).abs();
        for j in 0..p {
            let m = x.column(j).sum() / nf;
            let sd = (x.column(j).iter().map(|v| (v - m).powi(2)).sum::<f64>() / nf).sqrt();
            let grad = (0..n).map(|i| (prob[i] - y[i]) * (x[(i, j)] - m) / sd).sum::<f64>() / nf;
            let b = model.coefficients[j] * sd;
            let v = if b != 0.0 { (grad + lambda * b.signum()).abs() } else { (grad.abs() - lambda).max(0.0) };
            worst = worst.max(v);
        }
        worst
    }

    #[test]
    fn lasso_logistic_satisfies_subgradient_conditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = gaussian(80, 12, &mut rng);
        let y: Vec<f64> = (0..80)
            .map(|i| (rng.random::<f64>() < sigmoid(1.5 * x[(i, 0)] - x[(i, 4)] + 0.5 * x[(i, 7)])) as u8 as f64)
            .collect();
        let study = logistic_study(x, y);
        for lambda in [0.005, 0.03, 0.1] {
            let m = fit(&LearnerSpec::lasso_logistic(), &study, lambda).unwrap();
            let v = lasso_kkt_violation(&study, &m, lambda);
            assert!(v < 1e-6, "lambda {lambda}: violation {v}");
        }
        let big = fit(&LearnerSpec::lasso_logistic(), &study, 10.0).unwrap();
        assert!(big.coefficients.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn predictions_invariant_to_column_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = gaussian(40, 4, &mut rng);
        let y: Vec<f64> = (0..40).map(|i| (x[(i, 0)] - x[(i, 2)] + 0.3 > 0.0) as u8 as f64).collect();
        let test = gaussian(7, 4, &mut rng);
        let perm = [2, 0, 3, 1];
        for spec in [LearnerSpec::ridge_logistic(), LearnerSpec::lasso_logistic()] {
            let a = fit(&spec, &logistic_study(x.clone(), y.clone()), 0.05).unwrap();
            let b = fit(&spec, &logistic_study(x.select_columns(&perm), y.clone()), 0.05).unwrap();
            let pa = predict(&a, &test).unwrap();
            let pb = predict(&b, &test.select_columns(&perm)).unwrap();
            for (u, v) in pa.iter().zip(&pb) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unit_weights_match_unweighted_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = gaussian(30, 3, &mut rng);
        let y: Vec<f64> = (0..30).map(|i| (x[(i, 0)] > 0.0) as u8 as f64).collect();
        let s = logistic_study(x, y);
        let a = fit(&LearnerSpec::ridge_logistic(), &s, 0.1).unwrap();
        let b = fit_weighted(&LearnerSpec::ridge_logistic(), &s, Some(&[2.0; 30]), 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn integer_weights_match_row_duplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = gaussian(12, 2, &mut rng);
        let y: Vec<f64> = (0..12).map(|i| x[(i, 0)] * 0.5 + rng.sample::<f64, _>(StandardNormal) * 0.1).collect();
        let s = linear_study(x, y);
        let w: Vec<f64> = (0..12).map(|i| (i % 3 + 1) as f64).collect();
        let rows: Vec<usize> = (0..12).flat_map(|i| std::iter::repeat_n(i, i % 3 + 1)).collect();
        let dup = s.select_rows(&rows, "dup");
        let a = fit_weighted(&LearnerSpec::ridge_linear(), &s, Some(&w), 0.2).unwrap();
        let b = fit(&LearnerSpec::ridge_linear(), &dup, 0.2).unwrap();
        for (u, v) in a.coefficients.iter().zip(&b.coefficients) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn single_value_grid_is_returned() {
        let spec = LearnerSpec { penalty_grid: vec![0.37], ..LearnerSpec::ridge_logistic() };
        let s = logistic_study(DMatrix::zeros(3, 1), vec![0.0, 1.0, 0.0]);
        assert_eq!(tune_penalty(&spec, &s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), 0.37);
    }

    #[test]
    fn tuning_prefers_heavy_penalty_on_noise() {
        let spec = LearnerSpec { penalty_grid: vec![0.01, 100.0], ..LearnerSpec::ridge_logistic() };
        let mut heavy = 0;
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gaussian(60, 10, &mut rng);
            let y: Vec<f64> = (0..60).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
            if tune_penalty(&spec, &logistic_study(x, y), &mut rng).unwrap() == 100.0 {
                heavy += 1;
            }
        }
        assert!(heavy >= 45, "{heavy}/50");
    }

    #[test]
    fn tuning_prefers_light_penalty_on_strong_signal() {
        let spec = LearnerSpec { penalty_grid: vec![0.01, 1e6], ..LearnerSpec::ridge_linear() };
        let mut light = 0;
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = gaussian(40, 3, &mut rng);
            let y: Vec<f64> = (0..40)
                .map(|i| 3.0 * x[(i, 0)] - 2.0 * x[(i, 1)] + 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            if tune_penalty(&spec, &linear_study(x, y), &mut rng).unwrap() == 0.01 {
                light += 1;
            }
        }
        assert!(light >= 45, "{light}/50");
    }

    #[test]
    fn tuning_needs_both_classes_in_training_folds() {
        let mut y = vec![0.0; 10];
        y[0] = 1.0;
        let s = logistic_study(DMatrix::from_fn(10, 1, |i, _| i as f64), y);
        let err = tune_penalty(&LearnerSpec::ridge_logistic(), &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, Error::InvalidData(_)), "{err}");
        let small = logistic_study(DMatrix::zeros(3, 1), vec![0.0, 1.0, 0.0]);
        assert!(matches!(
            tune_penalty(&LearnerSpec::ridge_logistic(), &small, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn default_grid_spans_six_decades() {
        let g = default_penalty_grid();
        assert_eq!(g.len(), 20);
        assert!((g[0] - 1e-3).abs() < 1e-15 && (g[19] - 1e3).abs() < 1e-9);
    }
}
