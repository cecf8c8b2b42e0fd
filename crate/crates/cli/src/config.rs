//! Run configuration: one TOML file per run, with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crossstudy::arraymodel::ModelConfig;
use crossstudy::bootstrap::{BootstrapMode, BootstrapOptions, DEFAULT_JITTER_FLOOR, DEFAULT_SHRINKAGE};
use crossstudy::clusterstats::DEFAULT_SUBSAMPLE_ITERATIONS;
use crossstudy::data::OutcomeKind;
use crossstudy::learners::LearnerSpec;
use crossstudy::metrics::MetricSpec;
use crossstudy::simbench::ScenarioConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Thread count; does not change any output.
    #[serde(default, skip_serializing)]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub learner: Option<LearnerSection>,
    #[serde(default)]
    pub metric: Option<MetricSection>,
    #[serde(default)]
    pub zmatrix: ZMatrixSection,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub report: ReportSection,
    #[serde(default)]
    pub simulate: ScenarioConfig,
    #[serde(default)]
    pub replicate: ReplicateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Every `*.csv` file in this directory, in name order.
    pub dir: Option<PathBuf>,
    /// Explicit study files; the study id is the file stem.
    pub files: Option<Vec<PathBuf>>,
    pub outcome: OutcomeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSection {
    pub name: String,
    pub penalty_grid: Option<Vec<f64>>,
    pub cv_folds: Option<usize>,
    pub max_iterations: Option<usize>,
    pub convergence_tol: Option<f64>,
}

impl LearnerSection {
    pub fn spec(&self) -> Result<LearnerSpec, CliError> {
        let mut spec = LearnerSpec::from_name(&self.name).map_err(config_error)?;
        if let Some(g) = &self.penalty_grid {
            spec.penalty_grid = g.clone();
        }
        if let Some(k) = self.cv_folds {
            spec.cv_folds = k;
        }
        if let Some(m) = self.max_iterations {
            spec.max_iterations = m;
        }
        if let Some(t) = self.convergence_tol {
            spec.convergence_tol = t;
        }
        spec.validate().map_err(config_error)?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSection {
    pub name: String,
    pub tau: Option<f64>,
}

impl MetricSection {
    pub fn spec(&self) -> Result<MetricSpec, CliError> {
        MetricSpec::from_name(&self.name, self.tau).map_err(config_error)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZMatrixSection {
    /// Train on subsamples of this size (studies smaller than it are left
    /// out); `None` trains on full studies.
    pub training_size: Option<usize>,
    pub subsample_iterations: usize,
    pub freeze_penalty: bool,
}

impl Default for ZMatrixSection {
    fn default() -> Self {
        ZMatrixSection { training_size: None, subsample_iterations: DEFAULT_SUBSAMPLE_ITERATIONS, freeze_penalty: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub replicates: usize,
    pub mode: BootstrapMode,
    /// Subsample fits per replicate when `zmatrix.training_size` is set.
    pub subsample_iterations: usize,
    pub shrinkage_lambda: f64,
    pub jitter_floor: f64,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        let d = BootstrapOptions::default();
        BootstrapSection {
            replicates: d.replicates,
            mode: d.mode,
            subsample_iterations: d.subsample_iterations,
            shrinkage_lambda: DEFAULT_SHRINKAGE,
            jitter_floor: DEFAULT_JITTER_FLOOR,
        }
    }
}

impl BootstrapSection {
    pub fn options(&self, training_size: Option<usize>) -> BootstrapOptions {
        BootstrapOptions {
            replicates: self.replicates,
            mode: self.mode,
            training_size,
            subsample_iterations: self.subsample_iterations,
            uniform_weights: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub alpha: f64,
    pub m0: Option<f64>,
    pub tau0sq: Option<f64>,
    pub mcmc_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    /// Enumerate all partitions instead of Gibbs sampling.
    pub exact: Option<bool>,
    pub credible_level: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelSection {
            alpha: d.alpha,
            m0: d.m0,
            tau0sq: d.tau0sq,
            mcmc_iterations: d.mcmc_iterations,
            burn_in: d.burn_in,
            thin: d.thin,
            chains: d.chains,
            exact: None,
            credible_level: 0.95,
        }
    }
}

impl ModelSection {
    pub fn config(&self) -> Result<ModelConfig, CliError> {
        let c = ModelConfig {
            alpha: self.alpha,
            m0: self.m0,
            tau0sq: self.tau0sq,
            mcmc_iterations: self.mcmc_iterations,
            burn_in: self.burn_in,
            thin: self.thin,
            chains: self.chains,
        };
        c.validate().map_err(config_error)?;
        if !(self.credible_level > 0.0 && self.credible_level < 1.0) {
            return Err(CliError::Config("credible_level must lie in (0, 1)".into()));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    /// Output of `zmatrix` (or a bare serialized array).
    pub zmatrix: Option<PathBuf>,
    /// `dispersion.json` written by `bootstrap`.
    pub dispersion: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Output directory of `fit`.
    pub posterior: Option<PathBuf>,
    pub j_grid: Vec<usize>,
    pub subsample_iterations: usize,
    pub threshold_low: Option<usize>,
    pub threshold_high: Option<usize>,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            posterior: None,
            j_grid: Vec::new(),
            subsample_iterations: DEFAULT_SUBSAMPLE_ITERATIONS,
            threshold_low: None,
            threshold_high: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicateSection {
    pub n_replicates: usize,
    pub zeta_reps: usize,
    pub dispersion_inflation: Option<f64>,
}

impl Default for ReplicateSection {
    fn default() -> Self {
        let d = crossstudy::simbench::ReplicationConfig::default();
        ReplicateSection { n_replicates: d.n_replicates, zeta_reps: d.zeta_reps, dispersion_inflation: None }
    }
}

pub fn config_error(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub exact: bool,
}

impl RunConfig {
    /// Reads `path`, applies overrides and resolves relative paths against
    /// the directory holding the file.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.resolve_paths(&base);
        if overrides.seed.is_some() {
            config.seed = overrides.seed;
        }
        if overrides.workers.is_some() {
            config.workers = overrides.workers;
        }
        if let Some(out) = &overrides.out {
            config.out = Some(out.clone());
        }
        if overrides.exact {
            config.model.exact = Some(true);
        }
        if config.seed.is_none() {
            return Err(CliError::Config("a master `seed` is required (in the config or via --seed)".into()));
        }
        if config.workers == Some(0) {
            return Err(CliError::Config("workers must be positive".into()));
        }
        config.simulate.seed = config.seed.unwrap_or_default();
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = &mut self.data {
            d.dir.as_mut().map(fix);
            if let Some(files) = &mut d.files {
                files.iter_mut().for_each(fix);
            }
        }
        self.out.as_mut().map(fix);
        self.fit.zmatrix.as_mut().map(fix);
        self.fit.dispersion.as_mut().map(fix);
        self.report.posterior.as_mut().map(fix);
    }

    pub fn master_seed(&self) -> u64 {
        self.seed.unwrap_or_default()
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    /// Worker count and output location are excluded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| CliError::Config("no output directory (set `out` or pass --out)".into()))
    }

    pub fn learner_spec(&self) -> Result<LearnerSpec, CliError> {
        self.learner.as_ref().ok_or_else(|| CliError::Config("missing [learner] section".into()))?.spec()
    }

    pub fn metric_spec(&self) -> Result<MetricSpec, CliError> {
        self.metric.as_ref().ok_or_else(|| CliError::Config("missing [metric] section".into()))?.spec()
    }
}
