//! Command-line driver for empirical Bayes hyperparameter estimation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use log::error;

pub use commands::{execute, Command};
pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "krylov-eb", version, about = "Empirical Bayes hyperparameter estimation for linear inverse problems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: SubCmd,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Random seed (overrides `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum SubCmd {
    /// Estimate the hyperparameters and reconstruct the unknown.
    Estimate(CommonArgs),
    /// Tabulate objective errors and error indicators against the depth.
    Monitor(CommonArgs),
    /// Time the dense and bidiagonal objective paths.
    Benchmark(CommonArgs),
    /// MAP reconstruction at fixed hyperparameters.
    Reconstruct(CommonArgs),
}

impl SubCmd {
    fn split(&self) -> (Command, &CommonArgs) {
        match self {
            SubCmd::Estimate(a) => (Command::Estimate, a),
            SubCmd::Monitor(a) => (Command::Monitor, a),
            SubCmd::Benchmark(a) => (Command::Benchmark, a),
            SubCmd::Reconstruct(a) => (Command::Reconstruct, a),
        }
    }
}

/// Loads the configuration, applies the command-line overrides and runs.
pub fn run(cli: &Cli) -> CliResult<Vec<PathBuf>> {
    let (command, args) = cli.command.split();
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.display().to_string();
    }
    execute(command, &cfg, &PathBuf::from(&cfg.output_dir))
}

/// Process exit status for a finished run.
pub fn exit_status(result: &CliResult<Vec<PathBuf>>) -> i32 {
    match result {
        Ok(_) => 0,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
