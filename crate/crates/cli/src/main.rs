// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{Command, Settings};
use crate::error::{CliError, CliResult};

/// Bayesian mixed logit estimation by variational inference and MCMC.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence,
/// 5 IO error, 6 other numerical failure.
#[derive(Parser)]
#[command(name = "mmnl", version)]
struct Cli {
    /// TOML file with default settings; keys are the long flag names
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Simulate a dataset and its ground truth
    Simulate(Settings),
    /// Fit the model by batch or stochastic variational inference
    Fit(Settings),
    /// Draw from the posterior with Metropolis-within-Gibbs
    Mcmc(Settings),
    /// Compare predictive choice distributions of two posteriors
    Assess(Settings),
    /// Fit several backends, compare them and cross-validate
    Compare(Settings),
}

fn run(cli: Cli) -> CliResult<()> {
    let (command, flags) = match cli.command {
        Sub::Simulate(s) => (Command::Simulate, s),
        Sub::Fit(s) => (Command::Fit, s),
        Sub::Mcmc(s) => (Command::Mcmc, s),
        Sub::Assess(s) => (Command::Assess, s),
        Sub::Compare(s) => (Command::Compare, s),
    };
    let file = match cli.config {
        Some(path) => {
            let s = Settings::from_toml_file(&path)?;
            Some((path, s))
        }
        None => None,
    };
    let cfg = config::resolve(command, flags, file)?;
    eprintln!(
        "resolved config: {}",
        serde_json::to_string_pretty(&cfg.to_json()).expect("config serializes")
    );
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    commands::run(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
