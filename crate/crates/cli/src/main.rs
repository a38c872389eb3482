use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pvseg_cli::commands::{self, EvaluateArgs, PhantomSpec, TrainArgs};
use pvseg_cli::{log, PipelineConfig, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "pvseg", version, about = "Perivascular-space segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resample, enhance and normalise every case of a manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified k-fold split by dataset and burden.
    CvSplit {
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to eval.k_folds from the config.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on one fold (or on every case without --folds).
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        folds: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Predict label maps for every case of a manifest.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force_fingerprint_mismatch: bool,
    },
    /// Compare predicted labels with reference labels.
    Evaluate {
        /// Manifest of predictions.
        #[arg(long)]
        manifest: PathBuf,
        /// Manifest of reference labels.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the table as CSV to this path.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        force_fingerprint_mismatch: bool,
        #[arg(long)]
        pooled: bool,
    },
    /// Write a synthetic phantom cohort.
    Phantom {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Preprocess { manifest, config, out } => {
            let cfg = PipelineConfig::load(config.as_deref())?;
            commands::cmd_preprocess(&manifest, &cfg, &out)?;
        }
        Command::CvSplit {
            manifest,
            k,
            seed,
            config,
            out,
        } => {
            let cfg = PipelineConfig::load(config.as_deref())?;
            commands::cmd_cv_split(&manifest, k.unwrap_or(cfg.eval.k_folds), seed, &out)?;
        }
        Command::Train {
            manifest,
            folds,
            fold,
            config,
            out,
            checkpoint,
        } => {
            let cfg = PipelineConfig::load(config.as_deref())?;
            commands::cmd_train(TrainArgs {
                manifest: &manifest,
                folds: folds.as_deref(),
                fold,
                config: &cfg,
                out: &out,
                resume: checkpoint.as_deref(),
            })?;
        }
        Command::Infer {
            checkpoint,
            manifest,
            out,
            force_fingerprint_mismatch,
        } => {
            commands::cmd_infer(&checkpoint, &manifest, &out, force_fingerprint_mismatch)?;
        }
        Command::Evaluate {
            manifest,
            reference,
            config,
            out,
            csv,
            force_fingerprint_mismatch,
            pooled,
        } => {
            let cfg = PipelineConfig::load(config.as_deref())?;
            commands::cmd_evaluate(EvaluateArgs {
                predictions: &manifest,
                reference: &reference,
                config: &cfg,
                out: &out,
                csv: csv.as_deref(),
                force: force_fingerprint_mismatch,
                pooled,
            })?;
        }
        Command::Phantom { config, n, seed, out } => {
            let spec = PhantomSpec::load(config.as_deref())?;
            commands::cmd_phantom(&spec, n, seed, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            log::error("failed", json!({"message": e.to_string(), "exit_code": code}));
            ExitCode::from(code as u8)
        }
    }
}
