use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crossstudy::arraymodel::{
    fit_posterior, predict_new_study, summarize, ArrayModel, NewStudyPrediction,
    PartitionFrequency, PosteriorSample, PosteriorSummary,
};
use crossstudy::bootstrap::{bootstrap_z, estimate_dispersion, normality_diagnostics, DispersionEstimate, EntryDiagnostic};
use crossstudy::clusterstats::{
    curve_table, estimate_zbs, plug_in_zbs, run_threshold_pipeline, write_curve_csv, write_estimates_text,
    AdjustedPartitionPosterior, ClusterStatEstimate, CurveRow, PipelineConfig,
};
use crossstudy::data::{align_features, csv_files_in, load_studies, write_study, StudyCollection};
use crossstudy::learners::LearnerSpec;
use crossstudy::metrics::MetricSpec;
use crossstudy::partition::{point_estimate, Partition};
use crossstudy::rng::{tag, SeedStream};
use crossstudy::simbench::{
    generate, run_replication, write_records_csv, ReplicationConfig, ReplicationReport, ScenarioConfig,
    ScenarioParameters, StageConfig,
};
use crossstudy::zharness::{Harness, ZMatrix};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{OutputDir, Provenance};

/// Tolerance stamped next to the pushforward check in report summaries.
pub const PUSHFORWARD_TOLERANCE: f64 = 1e-9;

pub struct Context {
    pub config: RunConfig,
    pub force: bool,
}

impl Context {
    fn seeds(&self) -> SeedStream {
        SeedStream::new(self.config.master_seed())
    }

    fn output(&self, command: &'static str) -> Result<OutputDir, CliError> {
        let provenance =
            Provenance { command, config_digest: self.config.digest(), master_seed: self.config.master_seed() };
        OutputDir::prepare(self.config.out_dir()?, self.force, provenance)
    }

    fn collection(&self) -> Result<StudyCollection, CliError> {
        let data = self.config.data.as_ref().ok_or_else(|| CliError::Config("missing [data] section".into()))?;
        let paths: Vec<PathBuf> = match (&data.dir, &data.files) {
            (Some(dir), None) => csv_files_in(dir).map_err(|e| CliError::Input { path: dir.clone(), message: e.to_string() })?,
            (None, Some(files)) => files.clone(),
            _ => return Err(CliError::Config("[data] needs exactly one of `dir` and `files`".into())),
        };
        if paths.is_empty() {
            return Err(CliError::Config("[data] names no study files".into()));
        }
        let collection = load_studies(&paths, data.outcome)?;
        Ok(if collection.is_aligned() { collection } else { align_features(&collection)? })
    }

    fn harness(&self) -> Result<Harness, CliError> {
        Ok(Harness::new(self.collection()?, self.config.learner_spec()?, self.config.metric_spec()?, self.seeds())?
            .with_freeze_penalty(self.config.zmatrix.freeze_penalty))
    }
}

fn read_json(path: &Path) -> Result<serde_json::Value, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input { path: path.to_path_buf(), message: e.to_string() })
}

/// Parses `field` of a stamped output, or the whole file when the field is
/// absent (a bare serialized value).
fn read_payload<T: for<'de> Deserialize<'de>>(path: &Path, field: &str) -> Result<T, CliError> {
    let mut value = read_json(path)?;
    let payload = match value.get_mut(field) {
        Some(v) => v.take(),
        None => value,
    };
    serde_json::from_value(payload).map_err(|e| CliError::Input { path: path.to_path_buf(), message: e.to_string() })
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    path.as_deref().ok_or_else(|| CliError::Config(format!("missing `{key}`")))
}

#[derive(Serialize)]
struct TruthFile<'a> {
    scenario: &'a ScenarioConfig,
    parameters: ScenarioParameters,
    study_ids: Vec<String>,
    true_partition: Partition,
}

pub fn simulate(ctx: &Context) -> Result<PathBuf, CliError> {
    let scenario = &ctx.config.simulate;
    scenario.validate()?;
    let out = ctx.output("simulate")?;
    let collection = generate(scenario)?;
    for study in collection.studies() {
        write_study(study, &out.path(&format!("{}.csv", study.id())))?;
    }
    out.write_json(
        "truth.json",
        &TruthFile {
            scenario,
            parameters: ScenarioParameters::new(scenario),
            study_ids: collection.ids(),
            true_partition: scenario.true_partition(),
        },
    )?;
    out.commit()
}

#[derive(Serialize)]
struct ZMatrixFile<'a> {
    zmatrix: &'a ZMatrix,
}

pub fn zmatrix(ctx: &Context) -> Result<PathBuf, CliError> {
    let out = ctx.output("zmatrix")?;
    let harness = ctx.harness()?;
    let z = match ctx.config.zmatrix.training_size {
        Some(n0) => harness.compute_z_adjusted(n0, ctx.config.zmatrix.subsample_iterations)?,
        None => harness.compute_z()?,
    };
    out.write_json("zmatrix.json", &ZMatrixFile { zmatrix: &z })?;
    out.commit()
}

#[derive(Serialize)]
struct ReplicateLine<'a> {
    replicate: usize,
    values: &'a [f64],
}

#[derive(Serialize)]
struct DispersionFile<'a> {
    study_ids: &'a [String],
    mode: crossstudy::bootstrap::BootstrapMode,
    replicates: usize,
    training_size: Option<usize>,
    positive_definite: bool,
    dispersion: &'a DispersionEstimate,
    /// Present with at least 100 replicates.
    normality: Option<Vec<EntryDiagnostic>>,
}

pub fn bootstrap(ctx: &Context) -> Result<PathBuf, CliError> {
    let out = ctx.output("bootstrap")?;
    let harness = ctx.harness()?;
    let b = &ctx.config.bootstrap;
    let reps = bootstrap_z(&harness, &b.options(ctx.config.zmatrix.training_size))?;
    let disp = estimate_dispersion(&reps, b.shrinkage_lambda, b.jitter_floor)?;
    out.write_jsonl(
        "replicates.jsonl",
        reps.replicates.iter().enumerate().map(|(replicate, v)| ReplicateLine { replicate, values: v }),
    )?;
    let normality = (reps.len() >= 100).then(|| normality_diagnostics(&reps)).transpose()?;
    out.write_json(
        "dispersion.json",
        &DispersionFile {
            study_ids: &reps.study_ids,
            mode: reps.mode,
            replicates: reps.len(),
            training_size: reps.training_size,
            positive_definite: disp.check().is_ok(),
            dispersion: &disp,
            normality,
        },
    )?;
    out.commit()
}

#[derive(Serialize)]
struct FitSummary {
    study_ids: Vec<String>,
    exact: bool,
    chains: usize,
    n_samples: usize,
    alpha: f64,
    m0: f64,
    tau0sq: f64,
    /// Largest co-clustering frequency gap between chains (sampler only).
    between_chain_gap: Option<f64>,
    /// Exact probabilities, or sampled frequencies, heaviest first.
    partitions: Vec<PartitionFrequency>,
    posterior: PosteriorSummary,
    new_study: NewStudyPrediction,
}

pub fn fit(ctx: &Context) -> Result<PathBuf, CliError> {
    let z: ZMatrix = read_payload(required(&ctx.config.fit.zmatrix, "fit.zmatrix")?, "zmatrix")?;
    let disp: DispersionEstimate = read_payload(required(&ctx.config.fit.dispersion, "fit.dispersion")?, "dispersion")?;
    if disp.study_ids != z.study_ids {
        return Err(CliError::Config(format!(
            "dispersion studies {:?} do not match the array's {:?}",
            disp.study_ids, z.study_ids
        )));
    }
    let section = &ctx.config.model;
    let model_config = section.config()?;
    let out = ctx.output("fit")?;
    let model = ArrayModel::new(&z, &disp, &model_config)?;
    let exact = section.exact.unwrap_or(false);
    let seeds = ctx.seeds();
    let post = fit_posterior(&model, &model_config, exact, seeds)?;
    let posterior = summarize(&post.samples, section.credible_level, &z.study_ids)?;
    let new_study = predict_new_study(&post.samples, &model, section.credible_level, &mut seeds.rng(&[tag::PREDICT]))?;
    let mut partitions: Vec<PartitionFrequency> =
        post.atoms.iter().map(|(labels, frequency)| PartitionFrequency { labels: labels.clone(), frequency: *frequency }).collect();
    partitions.sort_by(|a, b| b.frequency.total_cmp(&a.frequency).then_with(|| a.labels.cmp(&b.labels)));
    out.write_jsonl("samples.jsonl", &post.samples)?;
    out.write_json(
        "summary.json",
        &FitSummary {
            study_ids: z.study_ids.clone(),
            exact,
            chains: model_config.chains,
            n_samples: post.samples.len(),
            alpha: model.alpha(),
            m0: model.m0(),
            tau0sq: model.tau0sq(),
            between_chain_gap: post.between_chain_gap,
            partitions,
            posterior,
            new_study,
        },
    )?;
    out.commit()
}

#[derive(Serialize)]
struct ClusterStatRow<'a> {
    study_id: &'a str,
    posterior_averaged: Option<f64>,
    plug_in: Option<f64>,
    conditioning_probability: f64,
    n_effective_samples: usize,
}

#[derive(Serialize)]
struct ThresholdSummary<'a> {
    threshold_low: usize,
    threshold_high: usize,
    included_high: Vec<String>,
    adjusted: &'a AdjustedPartitionPosterior,
    pushforward_error: f64,
    pushforward_tolerance: f64,
    pushforward_ok: bool,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    study_ids: Vec<String>,
    point_estimate: &'a Partition,
    posterior_averaged: &'a [ClusterStatEstimate],
    plug_in: &'a [ClusterStatEstimate],
    curves: &'a [CurveRow],
    threshold: Option<ThresholdSummary<'a>>,
}

fn read_samples(path: &Path) -> Result<Vec<PosteriorSample>, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Input { path: path.to_path_buf(), message: format!("line {}: {e}", i + 1) })
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Io { path: path.to_path_buf(), source: std::io::Error::other(e) };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(CliError::io(path))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

pub fn report(ctx: &Context) -> Result<PathBuf, CliError> {
    let section = &ctx.config.report;
    let fit_dir = required(&section.posterior, "report.posterior")?;
    let samples = read_samples(&fit_dir.join("samples.jsonl"))?;
    if samples.is_empty() {
        return Err(CliError::Input { path: fit_dir.join("samples.jsonl"), message: "no posterior samples".into() });
    }
    let fit_ids: Vec<String> = read_payload(&fit_dir.join("summary.json"), "study_ids")?;
    if let (Some(lo), Some(hi)) = (section.threshold_low, section.threshold_high) {
        if lo > hi {
            return Err(CliError::Config("threshold_low exceeds threshold_high".into()));
        }
    } else if section.threshold_low.is_some() || section.threshold_high.is_some() {
        return Err(CliError::Config("set both threshold_low and threshold_high, or neither".into()));
    }
    let out = ctx.output("report")?;
    let full = ctx.collection()?;
    let idx = fit_ids.iter().map(|id| full.index_of(id)).collect::<crossstudy::Result<Vec<usize>>>()?;
    let learner = ctx.config.learner_spec()?;
    let metric = ctx.config.metric_spec()?;
    let harness = Harness::new(full.subset(&idx)?, learner.clone(), metric, ctx.seeds())?
        .with_freeze_penalty(ctx.config.zmatrix.freeze_penalty);
    let draws: Vec<Partition> = samples.into_iter().map(|s| s.partition).collect();
    let point = point_estimate(&draws, None)?;
    let n = fit_ids.len();
    let averaged = (0..n).map(|s| estimate_zbs(&harness, &draws, s)).collect::<crossstudy::Result<Vec<_>>>()?;
    let plug_in = (0..n).map(|s| plug_in_zbs(&harness, &point, s)).collect::<crossstudy::Result<Vec<_>>>()?;
    let rows: Vec<ClusterStatRow> = averaged
        .iter()
        .zip(&plug_in)
        .map(|(a, p)| ClusterStatRow {
            study_id: &a.target_study,
            posterior_averaged: a.value,
            plug_in: p.value,
            conditioning_probability: a.conditioning_probability,
            n_effective_samples: a.n_effective_samples,
        })
        .collect();
    write_csv(&out.path("cluster_stats.csv"), &rows)?;
    let curves = if section.j_grid.is_empty() {
        Vec::new()
    } else {
        let c = curve_table(&harness, &draws, &section.j_grid, section.subsample_iterations)?;
        write_curve_csv(&c, &out.path("curves.csv"))?;
        c
    };
    let pipeline = match (section.threshold_low, section.threshold_high) {
        (Some(lo), Some(hi)) => Some(threshold(ctx, full, learner, metric, lo, hi)?),
        _ => None,
    };
    let threshold_summary = pipeline.as_ref().map(|r| ThresholdSummary {
        threshold_low: r.adjusted.threshold_low.unwrap_or_default(),
        threshold_high: r.adjusted.threshold_high.unwrap_or_default(),
        included_high: r.adjusted.included_high.iter().map(|&i| r.study_ids[i].clone()).collect(),
        adjusted: &r.adjusted,
        pushforward_error: r.pushforward_error,
        pushforward_tolerance: PUSHFORWARD_TOLERANCE,
        pushforward_ok: r.pushforward_error <= PUSHFORWARD_TOLERANCE,
    });
    let text = summary_text(&fit_ids, &point, &averaged, &plug_in, &curves, threshold_summary.as_ref());
    out.write_json(
        "report.json",
        &ReportFile {
            study_ids: fit_ids.clone(),
            point_estimate: &point,
            posterior_averaged: &averaged,
            plug_in: &plug_in,
            curves: &curves,
            threshold: threshold_summary,
        },
    )?;
    out.write_text("summary.txt", &text)?;
    out.commit()
}

fn threshold(
    ctx: &Context,
    collection: StudyCollection,
    learner: LearnerSpec,
    metric: MetricSpec,
    lo: usize,
    hi: usize,
) -> Result<crossstudy::clusterstats::ThresholdPipelineResult, CliError> {
    let c = &ctx.config;
    let config = PipelineConfig {
        subsample_iterations: c.zmatrix.subsample_iterations,
        bootstrap: c.bootstrap.options(None),
        shrinkage_lambda: c.bootstrap.shrinkage_lambda,
        jitter_floor: c.bootstrap.jitter_floor,
        model: c.model.config()?,
        exact: c.model.exact,
    };
    Ok(run_threshold_pipeline(collection, learner, metric, lo, hi, &config, ctx.seeds())?)
}

fn summary_text(
    ids: &[String],
    point: &Partition,
    averaged: &[ClusterStatEstimate],
    plug_in: &[ClusterStatEstimate],
    curves: &[CurveRow],
    threshold: Option<&ThresholdSummary>,
) -> String {
    let mut t = String::new();
    let clusters: Vec<String> = point
        .clusters()
        .iter()
        .map(|c| format!("{{{}}}", c.iter().map(|&i| ids[i].as_str()).collect::<Vec<_>>().join(", ")))
        .collect();
    let _ = writeln!(t, "Point estimate: {} clusters: {}", point.n_clusters(), clusters.join(" "));
    let _ = writeln!(t, "\nCluster statistic Z_B(s),s (posterior-averaged)");
    let mut buf = Vec::new();
    let _ = write_estimates_text(&mut buf, averaged);
    t.push_str(&String::from_utf8_lossy(&buf));
    let _ = writeln!(t, "\nCluster statistic Z_B(s),s (plug-in at the point estimate)");
    for e in plug_in {
        let _ = writeln!(t, "  {:<16} {}", e.target_study, fmt_opt(e.value));
    }
    if !curves.is_empty() {
        let _ = writeln!(t, "\nSubsampled curves Z^j_B(s),s");
        let _ = writeln!(t, "  {:<16} {:>6} {:>12} {:>12} {:>10}", "study", "j", "estimate", "reference", "P(cond)");
        for r in curves {
            let _ = writeln!(
                t,
                "  {:<16} {:>6} {:>12} {:>12} {:>10.4}",
                r.study_id,
                r.j,
                fmt_opt(r.estimate),
                fmt_opt(r.reference_estimate),
                r.conditioning_probability
            );
        }
    }
    match threshold {
        Some(th) => {
            let _ = writeln!(t, "\nThreshold adjustment: low {} / high {}", th.threshold_low, th.threshold_high);
            let _ = writeln!(t, "  studies above the high threshold: {}", th.included_high.join(", "));
            let mut top: Vec<_> = th.adjusted.probabilities.iter().collect();
            top.sort_by(|a, b| b.probability.total_cmp(&a.probability).then_with(|| a.labels.cmp(&b.labels)));
            for p in top.iter().take(5) {
                let _ = writeln!(t, "  {:?}  {:.6}", p.labels.labels(), p.probability);
            }
            let _ = writeln!(
                t,
                "  pushforward identity: max deviation {:.3e} (tolerance {:.0e}) {}",
                th.pushforward_error,
                th.pushforward_tolerance,
                if th.pushforward_ok { "PASS" } else { "FAIL" }
            );
        }
        None => {
            let _ = writeln!(t, "\nThreshold adjustment: not requested");
        }
    }
    t
}

#[derive(Serialize)]
struct ReplicateFile<'a> {
    config: &'a ReplicationConfig,
    report: &'a ReplicationReport,
}

pub fn replicate(ctx: &Context) -> Result<PathBuf, CliError> {
    let c = &ctx.config;
    let defaults = ReplicationConfig::default();
    let config = ReplicationConfig {
        scenario: c.simulate.clone(),
        n_replicates: c.replicate.n_replicates,
        learner: match &c.learner {
            Some(l) => l.spec()?,
            None => defaults.learner,
        },
        metric: match &c.metric {
            Some(m) => m.spec()?,
            None => defaults.metric,
        },
        stage: StageConfig {
            bootstrap: c.bootstrap.options(None),
            shrinkage_lambda: c.bootstrap.shrinkage_lambda,
            jitter_floor: c.bootstrap.jitter_floor,
            model: c.model.config()?,
            exact: c.model.exact,
            dispersion_inflation: c.replicate.dispersion_inflation,
        },
        zeta_reps: c.replicate.zeta_reps,
    };
    config.scenario.validate()?;
    let out = ctx.output("replicate")?;
    let report = run_replication(&config, ctx.seeds())?;
    out.write_json("report.json", &ReplicateFile { config: &config, report: &report })?;
    write_records_csv(&report, &out.path("records.csv"))?;
    out.write_text("summary.txt", &replication_text(&report))?;
    out.commit()
}

fn replication_text(r: &ReplicationReport) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "Replicates: {} ({} failed)", r.n_replicates, r.n_failed);
    let _ = writeln!(t, "Distance to the true partition: mean {:.3}, median {:.1}", r.distance_mean, r.distance_median);
    let _ = writeln!(
        t,
        "  quartiles {:.1} / {:.1} / {:.1}",
        r.distance_quartiles[0], r.distance_quartiles[1], r.distance_quartiles[2]
    );
    let counts: BTreeMap<usize, usize> = r.distance_counts.iter().copied().enumerate().filter(|(_, c)| *c > 0).collect();
    for (d, c) in counts {
        let _ = writeln!(t, "  distance {d}: {c}");
    }
    let _ = writeln!(t, "Posterior-mean estimator beats the raw array entry on");
    let _ = writeln!(t, "  MSE for {:.1}% of pairs", 100.0 * r.bayes_mse_win_fraction);
    let _ = writeln!(t, "  MAE for {:.1}% of pairs", 100.0 * r.bayes_mae_win_fraction);
    t
}
