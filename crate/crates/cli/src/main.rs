//! `rlf-lab`: runs one scenario file through one experiment and writes CSV
//! tables and SVG charts.

mod commands;
mod output;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rlf_core::ErrorClass;

use crate::commands::Context;
use crate::output::Output;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] rlf_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Infeasible => 3,
                ErrorClass::Internal => 4,
            },
        }
    }
}

#[derive(Parser)]
#[command(name = "rlf-lab", version, about = "Regular Lagrangian flow experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory (default: `output.dir` of the scenario, else `rlf-out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Flow grid, compressibility, Lusin sets and round-trip errors.
    Flow { scenario: PathBuf },
    /// Lagrangian solution, density ratio and mass balance.
    Transport { scenario: PathBuf },
    /// Eulerian and Lagrangian residuals and the change of variables.
    Residual { scenario: PathBuf },
    /// Lusin sets only.
    Lusin { scenario: PathBuf },
    /// Convergence of L_lambda, graph statistics and point distances.
    MetricScan { scenario: PathBuf },
    /// McShane extensions, certificates and the tube error estimate.
    Extend { scenario: PathBuf },
    /// Finite volumes against the Lagrangian solution.
    Uniqueness { scenario: PathBuf },
}

impl Command {
    fn scenario(&self) -> &PathBuf {
        match self {
            Command::Flow { scenario }
            | Command::Transport { scenario }
            | Command::Residual { scenario }
            | Command::Lusin { scenario }
            | Command::MetricScan { scenario }
            | Command::Extend { scenario }
            | Command::Uniqueness { scenario } => scenario,
        }
    }
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {n} threads: {e}")))?;
    }
    let loaded = scenario::load(cli.command.scenario())?;
    let seed = cli.seed.unwrap_or(loaded.scenario.seed);
    let dir = cli
        .out
        .clone()
        .or_else(|| loaded.scenario.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("rlf-out"));
    let out = Output::create(
        &dir,
        &loaded.sha256,
        seed,
        &[
            ("roundoff", rlf_core::extension::ROUNDOFF),
            ("cfl_limit", rlf_core::weakform::CFL_LIMIT),
            ("select_factor", loaded.scenario.metric.select_factor),
        ],
    )?;
    let mut ctx = Context {
        loaded: &loaded,
        out,
        seed,
    };
    match cli.command {
        Command::Flow { .. } => commands::flow(&mut ctx)?,
        Command::Transport { .. } => commands::transport(&mut ctx)?,
        Command::Residual { .. } => commands::residual(&mut ctx)?,
        Command::Lusin { .. } => commands::lusin(&mut ctx)?,
        Command::MetricScan { .. } => commands::metric_scan(&mut ctx)?,
        Command::Extend { .. } => commands::extend(&mut ctx)?,
        Command::Uniqueness { .. } => commands::uniqueness(&mut ctx)?,
    }
    Ok(ctx.out.written().to_vec())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("rlf-lab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
