//! `slq`: config-driven runner for the solver routes and the check suite.
//!
//! Exit status: 0 when every check passed or failed as declared, 1 when a
//! check failed unexpectedly, 2 on configuration, solver or i/o errors.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "slq", version, about = "Stochastic LQ solvers and optimality checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured solver routes and write value, kernel and gain tables.
    Solve(Common),
    /// Run the check suite and write a report.
    Verify(Common),
    /// Evaluate several routes over refinements and tabulate their gaps.
    Compare(Common),
    /// Evaluate one route over a range of one parameter.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out` in the file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for every random stream (overrides the file).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(cli: Cli) -> Result<bool, slq_core::SlqError> {
    let (name, common) = match &cli.command {
        Command::Solve(c) => ("solve", c),
        Command::Verify(c) => ("verify", c),
        Command::Compare(c) => ("compare", c),
        Command::Sweep(c) => ("sweep", c),
    };
    let cfg = ExperimentConfig::load(&common.config)?.resolve(common.out.clone(), common.seed, common.threads);
    if let Some(threads) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| slq_core::SlqError::Config(format!("threads: {e}")))?;
    }
    let outcome = match name {
        "solve" => commands::cmd_solve(&cfg)?,
        "verify" => commands::cmd_verify(&cfg)?,
        "compare" => commands::cmd_compare(&cfg)?,
        _ => commands::cmd_sweep(&cfg)?,
    };
    print!("{}", outcome.report);
    Ok(outcome.acceptable)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
