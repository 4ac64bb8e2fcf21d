//! `netml` command-line interface: simulate data, identify a network, print
//! diagnostics and run Monte Carlo studies.
//!
//! Exit codes: 0 ok, 2 input or configuration error, 3 generation error,
//! 4 estimation error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "netml", version, about = "Maximum-likelihood identification of networks of ARMAX systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration; relative paths inside it are resolved against its directory.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created when missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a network and write `train.csv`, `valid.csv`, `model.json` and `meta.json`.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate a network from data and write `theta_hat.json`, `stages.json` and `metrics.json`.
    Identify {
        #[command(flatten)]
        common: Common,
        /// stationary, tv-lyapunov, tv-zero or toeplitz
        #[arg(long)]
        objective: Option<String>,
    },
    /// Riccati, informativity and reduced-system diagnostics in `diagnostics.json`.
    Diagnose {
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo study: `report.json`, `table1.csv`, `table2.csv`, `consistency.csv`.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        objective: Option<String>,
        /// Worker threads; 0 uses all cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
    pub fn generation(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
    pub fn estimation(message: impl Into<String>) -> Self {
        Self {
            code: 4,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Simulate { common } => commands::simulate(&common),
        Command::Identify { common, objective } => commands::identify(&common, objective.as_deref()),
        Command::Diagnose { common } => commands::diagnose(&common),
        Command::Montecarlo { common, objective, jobs } => commands::montecarlo(&common, objective.as_deref(), jobs),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
