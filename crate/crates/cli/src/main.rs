//! `crossstudy`: run the cross-study validation pipeline from a TOML
//! config file.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Context;
use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "crossstudy", version, about = "Bayesian nonparametric analysis of cross-study validation arrays")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated study collection and its ground truth.
    Simulate(Common),
    /// Compute the leave-one-in validation array.
    Zmatrix(Common),
    /// Bootstrap the array and estimate its dispersion.
    Bootstrap(Common),
    /// Infer the partition posterior from an array and its dispersion.
    Fit(Common),
    /// Cluster-based statistics, curves and threshold adjustment.
    Report(Common),
    /// Run a simulation replication experiment.
    Replicate(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed, overriding `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (outputs do not depend on this).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory, overriding `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
    /// Enumerate all partitions instead of sampling (at most 10 studies).
    #[arg(long)]
    exact: bool,
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let (common, cmd): (&Common, fn(&Context) -> Result<PathBuf, CliError>) = match &cli.command {
        Command::Simulate(c) => (c, commands::simulate),
        Command::Zmatrix(c) => (c, commands::zmatrix),
        Command::Bootstrap(c) => (c, commands::bootstrap),
        Command::Fit(c) => (c, commands::fit),
        Command::Report(c) => (c, commands::report),
        Command::Replicate(c) => (c, commands::replicate),
    };
    let overrides =
        Overrides { seed: common.seed, workers: common.workers, out: common.out.clone(), exact: common.exact };
    let config = RunConfig::load(&common.config, &overrides)?;
    if let Some(w) = config.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {w} workers: {e}")))?;
    }
    cmd(&Context { config, force: common.force })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
