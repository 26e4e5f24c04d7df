//! Batch runner: reads an experiment config, runs every scheme in closed
//! loop, and writes traces and summaries.
//!
//! Exit codes: 0 success, 1 config error, 2 a run failed to execute.

mod config;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "hmpc", version, about = "Hypersampled MPC experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Concurrent runs.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Parse and check the config, run nothing.
    #[arg(long, global = true)]
    validate_only: bool,
    /// Single disturbance seed (overrides the config's seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every scheme of the config.
    Run { config: PathBuf },
    /// Run the config over a grid of discretization and sampling times.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        td: Vec<f64>,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        ts: Vec<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (path, grid) = match &cli.command {
        Command::Run { config } => (config, None),
        Command::Sweep { config, td, ts } => (config, Some((td.clone(), ts.clone()))),
    };
    let mut cfg = match ExperimentConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.display().to_string();
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some((td, ts)) = &grid {
        cfg.schemes = runner::sweep_schemes(td, ts);
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    if cli.validate_only {
        println!("config ok: {} scheme(s), {} seed(s)", cfg.schemes.len(), cfg.seeds.len());
        return ExitCode::SUCCESS;
    }
    match runner::execute(&cfg, cli.workers.max(1), grid.is_some()) {
        Ok(report) => {
            for line in report {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
