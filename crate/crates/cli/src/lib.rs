//! The staged experiment pipeline behind the `nrc` tool.
//!
//! Stages run in order (prepare, mix, transform, train, eval, report), each
//! writing its artifacts and a `manifest.json` under `<work_dir>/<stage>`.
//! A stage whose config hash and artifacts are unchanged is skipped.

pub mod config;
pub mod error;
pub mod plot;
pub mod stages;
pub mod store;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{load_experiment, Experiment, ExperimentConfig, RunOptions, WORK_DIR_ENV};
pub use error::{CliError, Result};
pub use stages::{run_synth, with_workers, Pipeline, Stage, StageOutcome, SynthOutcome};
pub use store::StageManifest;

#[derive(Debug, Parser)]
#[command(name = "nrc", version, about = "Noise-robust heart sound classification pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads for per-frame work.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Log and drop recordings that fail to load instead of aborting.
    #[arg(long)]
    pub skip_bad: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter, resample, normalize, and frame every recording.
    Prepare(StageArgs),
    /// Corrupt the heart frames with noise at each SNR level.
    Mix(StageArgs),
    /// Render time-frequency images of every condition.
    Transform(StageArgs),
    /// Fit the classifier.
    Train(StageArgs),
    /// Score the trained model on every test condition.
    Eval(StageArgs),
    /// Collate training history and evaluation into tables and plots.
    Report(StageArgs),
    /// Write a synthetic corpus with manifests.
    Synth {
        #[arg(long, default_value_t = 40)]
        n_per_class: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn run_stage_command(stage: Stage, args: &StageArgs) -> Result<StageOutcome> {
    let exp = load_experiment(
        &args.config,
        RunOptions {
            workers: args.workers,
            seed: args.seed,
            skip_bad: args.skip_bad,
        },
    )?;
    with_workers(args.workers, || Pipeline::new(&exp).run(stage))?
}

/// Runs one parsed command, printing its outcome on stdout.
pub fn execute(cli: &Cli) -> Result<()> {
    let (stage, args) = match &cli.command {
        Command::Prepare(a) => (Stage::Prepare, a),
        Command::Mix(a) => (Stage::Mix, a),
        Command::Transform(a) => (Stage::Transform, a),
        Command::Train(a) => (Stage::Train, a),
        Command::Eval(a) => (Stage::Eval, a),
        Command::Report(a) => (Stage::Report, a),
        Command::Synth {
            n_per_class,
            out,
            seed,
            workers,
        } => {
            let o = with_workers(*workers, || run_synth(*n_per_class, *seed, out))??;
            println!("synth: wrote {} heart and {} lung recordings to {}", o.heart_files, o.lung_files, out.display());
            return Ok(());
        }
    };
    let outcome = run_stage_command(stage, args)?;
    println!("{outcome}");
    Ok(())
}
