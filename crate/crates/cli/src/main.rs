//! `dvi`: fits, hyperparameter grids, solver benchmarks and synthetic data
//! for dual variational inference.
//!
//! Exit status: 0 on success, 2 when a solver stops without converging (or
//! too many grid cells fail), 1 on any error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Run, Status};

#[derive(Debug, Parser)]
#[command(name = "dvi", version, about = "Dual variational Gaussian inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Seed for splits, sampling and synthetic data (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run grid cells or benchmark solvers concurrently.
    #[arg(long, global = true)]
    parallel: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one model; writes trace.csv, posterior.csv and summary.txt.
    Fit,
    /// Hyperparameter grid search; writes grid.csv.
    Grid,
    /// Race two or more solvers; writes one trace per solver and bench_summary.csv.
    Bench,
    /// Synthetic lattice Poisson dataset; writes edges.csv, counts.csv and truth.csv.
    Synth,
}

fn execute(cli: Cli) -> dvi_core::Result<Status> {
    let needs_config = !matches!(cli.command, Command::Synth);
    if needs_config && cli.config.is_none() {
        return Err(dvi_core::Error::Domain("--config is required".into()));
    }
    let config = commands::load_config(cli.config.as_deref())?;
    let run = Run {
        seed: match cli.seed {
            Some(s) => s,
            None => config.get_or("seed", 0)?,
        },
        parallel: cli.parallel || config.get_or("parallel", false)?,
        config,
        out: cli.out,
    };
    match cli.command {
        Command::Fit => commands::fit(&run),
        Command::Grid => commands::grid(&run),
        Command::Bench => commands::bench(&run),
        Command::Synth => commands::synth(&run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(Status::Success) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
