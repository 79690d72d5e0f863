// `!(x <= tol)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod plot;

use commands::{Failure, Globals};

/// Projector distillation lab: gradient checks, projector dynamics,
/// seeded experiments, equivariance scoring and low-rank checks.
///
/// Exit status: 0 success, 1 a check failed, 2 usage or config error.
#[derive(Parser)]
#[command(name = "dlab", version)]
struct Cli {
    /// JSON config for the subcommand; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed; experiments use seeds n, n+1, ….
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also write SVG plots.
    #[arg(long, global = true)]
    plot: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every analytic gradient.
    Gradcheck,
    /// Projector-only training on synthetic feature streams.
    Dynamics,
    /// Run a seeded experiment: fig2, fig3, logsum, batch_size, equivariance.
    Experiment { id: String },
    /// Score a token map's translational equivariance.
    Equivariance,
    /// Compare rank-limited projector training with the truncation optimum.
    Lowrank,
}

fn init_pool() -> Result<(), Failure> {
    let Ok(v) = std::env::var("DLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("DLAB_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot start {n} workers: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_pool()?;
    let g = Globals {
        config: cli.config,
        out: cli.out,
        seed: cli.seed,
        plot: cli.plot,
    };
    match cli.command {
        Command::Gradcheck => commands::gradcheck(&g),
        Command::Dynamics => commands::dynamics(&g),
        Command::Experiment { id } => commands::experiment(&g, &id),
        Command::Equivariance => commands::equivariance(&g),
        Command::Lowrank => commands::lowrank(&g),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
