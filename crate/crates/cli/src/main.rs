//! `rein`: data generation, source training, adaptation, evaluation and
//! self-checks for the synthetic two-domain benchmark.
//!
//! Exit codes: 0 success, 1 verification or training failure, 2 bad
//! configuration or arguments, 3 I/O.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rein_core::adapt::Ablation;
use rein_core::model::Mode;

#[derive(Parser, Debug)]
#[command(
    name = "rein",
    version,
    about = "Token refinement and domain adaptation on a synthetic benchmark"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (`key = value`). Flags override file values, which
    /// override built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (dataset root for gen-data, run directory otherwise).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
    /// Comma list of no_mix, no_mask, no_stm.
    #[arg(long, global = true)]
    pub ablate: Option<Ablation>,
    /// Allow writing into a non-empty dataset directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the paired source/target dataset.
    GenData,
    /// Supervised source training in the selected mode.
    TrainDg,
    /// Adapt a source-trained checkpoint to the target domain.
    AdaptDa {
        /// Checkpoint written by train-dg.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Semantic mIoU of a checkpoint on both validation splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Gradient checks, matcher oracle and parameter-count anchors.
    Verify,
    /// Parameter counts of the configured model and the published anchors.
    ParamCount,
    /// Collect run summaries and loss curves under --out into CSV files.
    Report,
}

fn init_logging() -> Result<(), String> {
    let level = match std::env::var("REIN_LOG_LEVEL").as_deref() {
        Err(_) | Ok("info") => log::LevelFilter::Info,
        Ok("error") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => {
            return Err(format!(
                "REIN_LOG_LEVEL={other:?}: expected error, info or debug"
            ))
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
