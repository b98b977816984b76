//! `embed-langevin`: train toy models, sample under constraints, evaluate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Common;
use crate::config::{Invalid, Paths};

/// Exit status for configurations rejected before any compute.
const EXIT_INVALID: u8 = 2;
const EXIT_FAILURE: u8 = 1;

#[derive(Parser)]
#[command(name = "embed-langevin", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Flags {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (checkpoint, JSONL or report).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for parallel chains.
    #[arg(long)]
    jobs: Option<usize>,
    /// Base directory for relative paths in configurations.
    #[arg(long, env = "EMBED_LANGEVIN_DATA", default_value = ".")]
    data_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base language model and its embedding table.
    TrainLm(Flags),
    /// Train a discriminative classifier or class-conditional LM on the base table.
    TrainClassifier(Flags),
    /// Draw constrained samples as JSONL records.
    Sample(Flags),
    /// Compute metrics over a JSONL file of samples.
    Eval {
        samples: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Compare optimizer-state memory of the embedding and simplex samplers.
    AblateMemory(Flags),
    /// Run the gradient suites and the table separation check.
    Verify {
        /// Checkpoint whose table is checked for separation.
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        flags: Flags,
    },
}

fn common(f: &Flags) -> Common {
    Common {
        config: f.config.clone(),
        seed: f.seed,
        out: f.out.clone(),
        paths: Paths {
            data_dir: f.data_dir.clone(),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrainLm(f) => commands::train_lm_cmd(&common(f)).map(|_| true),
        Command::TrainClassifier(f) => commands::train_classifier_cmd(&common(f)).map(|_| true),
        Command::Sample(f) => commands::sample_cmd(&common(f), f.jobs).map(|_| true),
        Command::Eval { samples, flags } => commands::eval_cmd(&common(flags), samples).map(|_| true),
        Command::AblateMemory(f) => commands::ablate_memory_cmd(&common(f)).map(|_| true),
        Command::Verify { checkpoint, flags } => commands::verify_cmd(&common(flags), checkpoint.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILURE),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Invalid>().is_some() {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
    }
}
