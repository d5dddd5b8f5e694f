use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dapperfl_core::experiment::{
    metrics_csv, parse_config, run_experiment, sweep, sweep_csv, ExperimentConfig,
};
use dapperfl_core::{Framework, SweepParam};

/// Heterogeneous federated learning simulator.
#[derive(Debug, Parser)]
#[command(name = "dapperfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write per-round metrics as CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        framework: Option<Framework>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Repeat an experiment once per value of a hyperparameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of alpha0, alpha_min, epsilon, gamma, rho.
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load(path: &PathBuf) -> Result<ExperimentConfig> {
    parse_config(path).with_context(|| format!("loading {}", path.display()))
}

fn emit(output: Option<&PathBuf>, csv: String) -> Result<()> {
    match output {
        Some(path) => {
            std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            rounds,
            framework,
            output,
        } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(t) = rounds {
                cfg.rounds = t;
            }
            if let Some(f) = framework {
                cfg.framework = f;
            }
            let output = output.or(cfg.output.take());
            let out = run_experiment(&cfg)?;
            emit(output.as_ref(), metrics_csv(&out.rows())?)
        }
        Command::Sweep {
            config,
            param,
            values,
            output,
        } => {
            let mut cfg = load(&config)?;
            if values.iter().any(|v| !v.is_finite()) {
                bail!("sweep values must be finite numbers");
            }
            let output = output.or(cfg.output.take());
            let out = sweep(&cfg, param, &values)?;
            emit(output.as_ref(), sweep_csv(&out)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
