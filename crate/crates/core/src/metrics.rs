//! Validation statistics that fill the cells of `Z`.

use serde::{Deserialize, Serialize};

use crate::data::Outcome;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Mse,
    MaeProb,
    ErrorRate,
    Auc,
    TruncatedConcordance,
}

/// A validation statistic. `tau` is the truncation time and is present
/// exactly for the truncated concordance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub kind: MetricKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

impl MetricSpec {
    pub fn mse() -> Self {
        MetricSpec { kind: MetricKind::Mse, tau: None }
    }

    pub fn mae_prob() -> Self {
        MetricSpec { kind: MetricKind::MaeProb, tau: None }
    }

    pub fn error_rate() -> Self {
        MetricSpec { kind: MetricKind::ErrorRate, tau: None }
    }

    pub fn auc() -> Self {
        MetricSpec { kind: MetricKind::Auc, tau: None }
    }

    pub fn truncated_concordance(tau: f64) -> Result<Self> {
        let spec = MetricSpec { kind: MetricKind::TruncatedConcordance, tau: Some(tau) };
        spec.validate()?;
        Ok(spec)
    }

    /// Metric by config name; `tau` is required for `truncated_concordance`
    /// and rejected otherwise.
    pub fn from_name(name: &str, tau: Option<f64>) -> Result<Self> {
        let kind = match name {
            "mse" => MetricKind::Mse,
            "mae_prob" => MetricKind::MaeProb,
            "error_rate" => MetricKind::ErrorRate,
            "auc" => MetricKind::Auc,
            "truncated_concordance" => MetricKind::TruncatedConcordance,
            other => return Err(Error::InvalidArgument(format!("unknown metric `{other}`"))),
        };
        let spec = MetricSpec { kind, tau };
        spec.validate()?;
        Ok(spec)
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            MetricKind::Mse => "mse",
            MetricKind::MaeProb => "mae_prob",
            MetricKind::ErrorRate => "error_rate",
            MetricKind::Auc => "auc",
            MetricKind::TruncatedConcordance => "truncated_concordance",
        }
    }

    pub fn higher_is_better(&self) -> bool {
        matches!(self.kind, MetricKind::Auc | MetricKind::TruncatedConcordance)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.tau) {
            (MetricKind::TruncatedConcordance, Some(t)) if t > 0.0 && !t.is_nan() => Ok(()),
            (MetricKind::TruncatedConcordance, _) => {
                Err(Error::InvalidArgument("truncated_concordance needs a positive tau".into()))
            }
            (_, Some(_)) => Err(Error::InvalidArgument(format!("tau is not used by {}", self.name()))),
            (_, None) => Ok(()),
        }
    }
}

/// Unweighted metric value.
pub fn evaluate(metric: &MetricSpec, predictions: &[f64], outcome: &Outcome) -> Result<f64> {
    evaluate_weighted(metric, predictions, outcome, None)
}

/// Metric with observation weights. Means become weighted means and each
/// comparable pair counts with weight `w_i w_j`. Integer weights give the
/// same value as replicating rows.
pub fn evaluate_weighted(
    metric: &MetricSpec,
    predictions: &[f64],
    outcome: &Outcome,
    weights: Option<&[f64]>,
) -> Result<f64> {
    metric.validate()?;
    let n = outcome.len();
    if predictions.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: predictions.len() });
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: w.len() });
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no observations".into()));
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    match (metric.kind, outcome) {
        (MetricKind::Mse, Outcome::Continuous(y) | Outcome::Binary(y)) => {
            weighted_mean(n, weight, |i| (y[i] - predictions[i]).powi(2))
        }
        (MetricKind::MaeProb, Outcome::Binary(y)) => weighted_mean(n, weight, |i| (y[i] - predictions[i]).abs()),
        (MetricKind::ErrorRate, Outcome::Binary(y)) => weighted_mean(n, weight, |i| {
            let class = if predictions[i] >= 0.5 { 1.0 } else { 0.0 };
            (class != y[i]) as u8 as f64
        }),
        (MetricKind::Auc, Outcome::Binary(y)) => auc(predictions, y, weight),
        (MetricKind::TruncatedConcordance, Outcome::Survival { time, event }) => {
            truncated_concordance(predictions, time, event, metric.tau.unwrap_or(f64::INFINITY), weight)
        }
        (kind, outcome) => Err(Error::OutcomeType(format!(
            "metric {:?} is not defined for {:?} outcomes",
            kind,
            outcome.kind()
        ))),
    }
}

fn weighted_mean(n: usize, weight: impl Fn(usize) -> f64, value: impl Fn(usize) -> f64) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let w = weight(i);
        if w != 0.0 {
            num += w * value(i);
            den += w;
        }
    }
    if !(den > 0.0) {
        return Err(Error::UndefinedMetric("total weight is zero".into()));
    }
    Ok(num / den)
}

/// Mann-Whitney statistic, ties counted one half, in `O(n log n)`.
fn auc(scores: &[f64], y: &[f64], weight: impl Fn(usize) -> f64) -> Result<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut neg_below, mut pos_total, mut neg_total) = (0.0, 0.0, 0.0);
    let mut numerator = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k;
        while end < order.len() && scores[order[end]] == scores[order[k]] {
            end += 1;
        }
        let (mut pos, mut neg) = (0.0, 0.0);
        for &i in &order[k..end] {
            if y[i] == 1.0 {
                pos += weight(i);
            } else {
                neg += weight(i);
            }
        }
        numerator += pos * (neg_below + 0.5 * neg);
        neg_below += neg;
        pos_total += pos;
        neg_total += neg;
        k = end;
    }
    if !(pos_total > 0.0 && neg_total > 0.0) {
        return Err(Error::UndefinedMetric("auc needs both outcome classes".into()));
    }
    Ok(numerator / (pos_total * neg_total))
}

/// Pairs `(i, j)` with `T_i < T_j`, `T_i <= tau` and an event at `T_i` are
/// comparable; the pair is concordant when `r_i > r_j`.
fn truncated_concordance(
    risk: &[f64],
    time: &[f64],
    event: &[bool],
    tau: f64,
    weight: impl Fn(usize) -> f64,
) -> Result<f64> {
    let n = risk.len();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        if !event[i] || time[i] > tau || weight(i) == 0.0 {
            continue;
        }
        for j in 0..n {
            if time[i] < time[j] {
                let w = weight(i) * weight(j);
                den += w;
                if risk[i] > risk[j] {
                    num += w;
                } else if risk[i] == risk[j] {
                    num += 0.5 * w;
                }
            }
        }
    }
    if !(den > 0.0) {
        return Err(Error::UndefinedMetric("no comparable pairs for concordance".into()));
    }
    Ok(num / den)
}
