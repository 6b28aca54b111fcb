//! `prefdiff`: pretrain, fine-tune, sweep and verify small preference-tuned
//! diffusion models.
//!
//! Exit status is 0 on success, 2 for configuration errors, 3 for a missing
//! artifact, 4 for a numerical abort and 1 for anything else.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prefdiff::conformance::Mutation;

use crate::commands::Context;
use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(
    name = "prefdiff",
    version,
    about = "Preference fine-tuning for small diffusion models"
)]
struct Cli {
    /// Experiment file (TOML). Defaults to the built-in mixture experiment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the seed (and the seed lists of `sweep` and `toy`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default experiment file to PATH.
    Init { path: PathBuf },
    /// Pretrain the reference denoiser.
    Pretrain,
    /// Fine-tune against the pretrained reference.
    Train {
        /// Continue from the latest checkpoint of this run.
        #[arg(long)]
        resume: bool,
        /// Stop after this many iterations.
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Fine-tune every (gamma, beta, seed) cell of the sweep grid.
    Sweep,
    /// Check the numerical properties and print a JSON report.
    Verify {
        /// Run against a deliberately broken implementation.
        #[arg(long)]
        mutation: Option<Mutation>,
        /// Only properties whose id starts with this prefix.
        #[arg(long)]
        only: Option<String>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the tabular exploration toy.
    Toy,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.sweep.seeds = vec![seed];
        config.toy.seeds = vec![seed];
    }
    Ok(config)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    match &cli.command {
        Command::Init { path } => commands::init(path, cli.force),
        Command::Verify { mutation, only, report } => commands::verify(*mutation, only.as_deref(), report.as_deref()),
        command => {
            let ctx = Context {
                config: load_config(&cli)?,
                force: cli.force,
            };
            match command {
                Command::Pretrain => commands::pretrain(&ctx),
                Command::Train { resume, max_iterations } => commands::train(&ctx, *resume, *max_iterations),
                Command::Sweep => commands::sweep_grid(&ctx),
                Command::Toy => commands::toy(&ctx),
                Command::Init { .. } | Command::Verify { .. } => unreachable!(),
            }
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
