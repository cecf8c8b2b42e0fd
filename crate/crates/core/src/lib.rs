//! Bayesian nonparametric analysis of leave-one-in cross-study validation.
//!
//! A learning algorithm is trained on each study of a collection and
//! validated on every other study, producing the array `Z` of validation
//! statistics. The crate estimates the sampling dispersion of `Z` by
//! bootstrap, infers a latent partition of the studies with a Dirichlet
//! process array model, and reports cluster-based performance summaries.
//!
//! Module map:
//!
//! - [`data`]: study datasets, CSV loading, alignment, subsampling, pooling.
//! - [`learners`]: penalized linear/logistic regression with CV tuning.
//! - [`metrics`]: validation statistics (MSE, MAE, error rate, AUC, concordance).
//! - [`zharness`]: the leave-one-in array and its pooled/subsampled variants.
//! - [`bootstrap`]: frequentist and Bayesian bootstrap of `Z`, dispersion estimate.
//! - [`partition`]: partition algebra, CRP prior, maximum transfer metric.
//! - [`arraymodel`]: exact and Gibbs posterior inference for the array model.
//! - [`clusterstats`]: cluster-based statistics and threshold adjustment.
//! - [`simbench`]: simulation scenarios, ground truth, replication experiments.

pub mod arraymodel;
pub mod bootstrap;
pub mod clusterstats;
pub mod data;
mod error;
pub mod learners;
pub mod metrics;
pub mod partition;
pub mod rng;
pub mod simbench;
pub mod stats;
pub mod zharness;

pub use error::{Error, ErrorClass, Result};
