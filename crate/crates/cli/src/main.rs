//! `mogen`: metadataset → train → tune → generate → select → evaluate/report.

mod commands;
mod config;
mod error;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mogen_core::sampler::Regime;
use mogen_core::space::SearchSpace;

use config::{Precision, RunConfig};
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "mogen", version, about = "Many-objective guided diffusion for architecture generation")]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Search space, overriding the configuration.
    #[arg(long, global = true)]
    space: Option<SearchSpace>,

    /// Numeric precision of the networks, overriding the configuration.
    #[arg(long, global = true)]
    precision: Option<Precision>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed of this step; defaults to the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path; defaults to a file in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Single batch guided by accuracy only (k_acc = 10,000).
    Diffusionnag,
    /// Efficient phase then accurate phase.
    Stretched,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample a meta-dataset of (task, architecture, objectives) records.
    Metadataset {
        #[arg(long)]
        n: Option<usize>,
        /// Also write held-out tasks here (default: tasks.json in the run directory).
        #[arg(long)]
        tasks_out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the score network by denoising score matching.
    TrainScore {
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the five predictors and write a Spearman report.
    TrainPredictors {
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Search guidance scales for one regime.
    Tune {
        #[arg(long)]
        regime: Regime,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        score: Option<PathBuf>,
        #[arg(long)]
        predictors: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate architectures for a task.
    Generate {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        task_index: usize,
        /// Scale files (tuner output or {efficient, accurate}); repeatable.
        #[arg(long)]
        scales: Vec<PathBuf>,
        /// Batch size (diffusionnag) or per-phase size (stretched).
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        score: Option<PathBuf>,
        #[arg(long)]
        predictors: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Build per-metric Pareto fronts and pick Acc/Bal/Eff.
    Select {
        #[arg(long)]
        batch: Option<PathBuf>,
        #[arg(long)]
        predictors: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Oracle comparison of picks against the single-guide baseline.
    Evaluate {
        #[arg(long)]
        batch: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        predictors: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write one CSV per metric for plotting fronts.
    Report {
        #[arg(long)]
        batch: Option<PathBuf>,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        predictors: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(space) = cli.space {
        cfg.space = space;
    }
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => commands::dispatch::<f32>(&cfg, cli.command),
        Precision::F64 => commands::dispatch::<f64>(&cfg, cli.command),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
