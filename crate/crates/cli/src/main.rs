use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fedvb_core::checkpoint::load_checkpoint;
use fedvb_core::experiment::{self, at_final, at_task_switch, metrics_csv_string};
use fedvb_core::{Error, ExperimentConfig};

/// Federated continual learning simulator with Bayesian aggregation.
#[derive(Parser)]
#[command(name = "fedvb", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics.csv into the output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic task splits as CSV files under <out_dir>/data.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a saved checkpoint and print its metrics as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
}

fn threads_from_env() -> anyhow::Result<Option<usize>> {
    match std::env::var("FEDVB_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("FEDVB_THREADS must be a non-negative integer, got `{v}`")).into()),
        Err(_) => Ok(None),
    }
}

fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_file(path)?;
    if let Some(t) = threads_from_env()? {
        config.threads = t;
    }
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut config = load_config(&config)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(out) = out {
                config.out_dir = out;
            }
            let output = experiment::run_experiment(&config)?;
            let final_round = output.schedule.total_rounds();
            println!("wrote {}", config.out_dir.join(experiment::METRICS_FILE).display());
            if let Some(ts) = at_task_switch(&output.records, &output.schedule) {
                for (task, acc) in ts {
                    println!("task {task} @TS  {acc:.2}");
                }
            }
            let fin = at_final(&output.records, final_round);
            for (task, acc) in &fin {
                println!("task {task} @Fin {acc:.2}");
            }
            if !fin.is_empty() {
                println!("average @Fin {:.2}", fin.values().sum::<f64>() / fin.len() as f64);
            }
        }
        Command::GenData { config } => {
            let config = load_config(&config)?;
            for path in experiment::generate_data(&config)? {
                println!("{}", path.display());
            }
        }
        Command::Eval { checkpoint, config } => {
            let config = load_config(&config)?;
            let state = load_checkpoint(&checkpoint)?;
            let records = experiment::evaluate_checkpoint(&config, &state)
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            print!("{}", metrics_csv_string(&records));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let config = err.chain().any(|e| e.downcast_ref::<Error>().is_some_and(Error::is_config_error));
            ExitCode::from(if config { 1 } else { 2 })
        }
    }
}
