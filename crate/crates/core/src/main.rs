use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use p2o::env::{self, Environment};
use p2o::harness::{
    self, CrossRunTable, InsertionCounter, Mode, ReflectorConfig, RunConfig,
};
use p2o::policy::{self, Sampling};
use p2o::Result;

#[derive(Parser)]
#[command(name = "p2o", version, about = "Joint policy and prompt optimization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training loop and write metrics, events and checkpoints.
    Train {
        /// JSON run configuration; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        reflector: Option<ReflectorConfig>,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        record_wall_time: bool,
        /// Output directory.
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Template-free accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL dataset; defaults to the held-out split of `--config`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        rollouts: usize,
        #[arg(long, default_value_t = 0.6)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-epoch CSV and cross-run summary from metrics files.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Writes epochs.csv and summary.csv here instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the retained templates of the last searched epoch.
    InspectTemplates {
        /// Run directory or templates.jsonl file.
        path: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            mode,
            seed,
            epochs,
            reflector,
            budget,
            record_wall_time,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.env.seed = s;
            }
            if let Some(e) = epochs {
                cfg.n_epochs = e;
            }
            if let Some(r) = reflector {
                cfg.reflector = r;
            }
            if let Some(b) = budget {
                cfg.gepa.budget = b;
            }
            cfg.record_wall_time |= record_wall_time;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
            let output = harness::run_p2o(&cfg, Some(&out))?;
            for m in &output.metrics {
                println!("{}", serde_json::to_string(m)?);
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            config,
            rollouts,
            temperature,
            seed,
        } => {
            let params = policy::load_checkpoint(&checkpoint)?;
            let samples = match dataset {
                Some(p) => env::load_dataset(&p)?,
                None => Environment::new(load_config(config.as_deref())?.env)?.heldout_set(),
            };
            let counter = InsertionCounter::default();
            let acc = harness::template_free_accuracy(
                &params,
                &samples,
                rollouts,
                Sampling::from_temperature(temperature)?,
                seed,
                0,
                &counter,
            )?;
            println!(
                "{}",
                serde_json::json!({
                    "samples": samples.len(),
                    "val_accuracy": acc.overall,
                    "hard_subset_accuracy": acc.hard_subset,
                })
            );
        }
        Command::Report { metrics, out } => {
            let runs = metrics
                .iter()
                .map(|p| harness::read_metrics(p))
                .collect::<Result<Vec<_>>>()?;
            let all: Vec<_> = runs.iter().flatten().cloned().collect();
            let epochs = harness::epoch_csv(&all)?;
            let summary = CrossRunTable::build(&runs)?.to_csv()?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    std::fs::write(dir.join("epochs.csv"), epochs)?;
                    std::fs::write(dir.join("summary.csv"), summary)?;
                }
                None => print!("{epochs}\n{summary}"),
            }
        }
        Command::InspectTemplates { path } => {
            let file = if path.is_dir() { path.join("templates.jsonl") } else { path };
            let records = harness::read_templates(&file)?;
            let Some(last) = records.iter().map(|r| r.epoch).max() else {
                println!("no templates retained");
                return Ok(());
            };
            for r in records.iter().filter(|r| r.epoch == last) {
                println!("{}", serde_json::to_string(r)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
