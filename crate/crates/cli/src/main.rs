mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Invocation, Overrides, ValueSource};
use config::ExperimentConfig;
use drbsde::Error;

#[derive(Parser)]
#[command(name = "drbsde", version, about = "Deep DRBSDE solver for Dynkin games and CfD valuation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to DRBSDE_THREADS, then the number of cores.
    #[arg(long, env = "DRBSDE_THREADS")]
    threads: Option<usize>,
}

#[derive(Args, Clone)]
struct Run {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `training.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `training.retrains`.
    #[arg(long)]
    retrains: Option<usize>,
    /// Uses the same number of epochs for every stage.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate state paths and write per-time summaries.
    Simulate {
        #[command(flatten)]
        run: Run,
        #[command(flatten)]
        common: Common,
    },
    /// Fit an OU model to every price column of a CSV file.
    Calibrate {
        /// Price CSV: a `date` column followed by one column per series.
        csv: PathBuf,
        /// Optional configuration supplying a `calibration` section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the deep solver, possibly several times, and evaluate it.
    Solve {
        #[command(flatten)]
        run: Run,
        #[command(flatten)]
        common: Common,
    },
    /// Solve a one-dimensional game on a grid; optionally compare a trained solver.
    Oracle {
        #[command(flatten)]
        run: Run,
        /// Directory of a solver written by `solve` (its `solver/` folder).
        #[arg(long)]
        solver: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Recover the pushing processes along simulated paths and verify them.
    Skorokhod {
        /// Solver directory written by `solve`.
        #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
        solver: Option<PathBuf>,
        /// Output directory of `oracle`.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        paths: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Summarise earlier runs into JSON and histogram CSVs.
    Report {
        /// Run directories containing a manifest.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Contract(_)
        | Error::Model(_)
        | Error::Data(_)
        | Error::Unsupported(_)
        | Error::Coverage(_)
        | Error::Serde(_) => 2,
        Error::NumericalBlowup { .. } | Error::NonFinite { .. } | Error::Training { .. } => 3,
        Error::Retrain { source, .. } => exit_code(source),
        Error::Io { .. } => 4,
    }
}

fn load(run: &Run) -> drbsde::Result<ExperimentConfig> {
    let o = Overrides { seed: run.seed, retrains: run.retrains, epochs: run.epochs };
    o.apply(ExperimentConfig::load(&run.config)?)
}

fn dispatch(cli: Cli) -> drbsde::Result<bool> {
    let common = match &cli.command {
        Command::Simulate { common, .. }
        | Command::Calibrate { common, .. }
        | Command::Solve { common, .. }
        | Command::Oracle { common, .. }
        | Command::Skorokhod { common, .. }
        | Command::Report { common, .. } => common.clone(),
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let name = match &cli.command {
        Command::Simulate { .. } => "simulate",
        Command::Calibrate { .. } => "calibrate",
        Command::Solve { .. } => "solve",
        Command::Oracle { .. } => "oracle",
        Command::Skorokhod { .. } => "skorokhod",
        Command::Report { .. } => "report",
    };
    let inv = Invocation {
        command: name.into(),
        args: std::env::args().skip(1).collect(),
        threads: rayon::current_num_threads(),
        started_at: manifest::now(),
    };
    let out = &common.out;
    match cli.command {
        Command::Simulate { run, .. } => commands::simulate(load(&run)?, out, &inv)?,
        Command::Calibrate { csv, config, .. } => {
            let cfg = config.map(|p| ExperimentConfig::load(&p)).transpose()?;
            commands::calibrate(&csv, cfg, out, &inv)?
        }
        Command::Solve { run, .. } => commands::solve(load(&run)?, out, &inv)?,
        Command::Oracle { run, solver, .. } => commands::oracle(load(&run)?, solver.as_deref(), out, &inv)?,
        Command::Skorokhod { solver, oracle, paths, seed, .. } => {
            let source = match (solver, oracle) {
                (Some(s), None) => ValueSource::Solver(s),
                (None, Some(o)) => ValueSource::Oracle(o),
                _ => return Err(Error::Config("give exactly one of --solver and --oracle".into())),
            };
            return commands::skorokhod(source, paths, seed, out, &inv);
        }
        Command::Report { runs, .. } => commands::report(&runs, out, &inv)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: verification failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
