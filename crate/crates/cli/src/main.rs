//! Command-line front end: micro-benchmarks over the simulated device node,
//! phantom data generation, reconstruction runs and report summaries.
//!
//! Exit codes: 0 on success with all asserted invariants passing, 2 for
//! configuration errors (the offending key is named), 3 for numerical
//! aborts, 1 for anything else.

mod commands;
mod config;
mod format;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "segdev",
    about = "Segmented containers and collectives on simulated devices, with a nonlinear-inversion reconstruction workload",
    version
)]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Number of simulated devices (overrides the config file).
    #[arg(long, global = true)]
    devices: Option<usize>,

    /// Topology description file (overrides the config file).
    #[arg(long, global = true)]
    topology: Option<PathBuf>,

    /// Random seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Transfer-primitive scenarios with per-path ledger totals.
    BenchTransfer,
    /// FFT/axpy/gemm scaling with locality assertions.
    BenchAlgos,
    /// Generate phantom ground truth, sensitivities, masks and k-space data.
    Phantom,
    /// Reconstruct frames from generated data; writes images and CSV reports.
    Recon,
    /// Summarize the CSV reports in a run directory.
    Report {
        /// Directory holding the reports (defaults to the configured output
        /// directory).
        dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides {
        devices: cli.devices,
        topology: cli.topology.clone(),
        seed: cli.seed,
        out: cli.out.clone(),
    };
    let config = match RunConfig::load(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };

    let result = match &cli.command {
        Command::BenchTransfer => commands::bench_transfer::run(&config),
        Command::BenchAlgos => commands::bench_algos::run(&config),
        Command::Phantom => commands::phantom::run(&config),
        Command::Recon => commands::recon::run(&config),
        Command::Report { dir } => {
            let dir = dir.clone().unwrap_or_else(|| config.out.clone());
            commands::report::run(&dir)
        }
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<segdev::Error>() {
                Some(segdev::Error::Numerical(_)) => ExitCode::from(3),
                Some(segdev::Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
