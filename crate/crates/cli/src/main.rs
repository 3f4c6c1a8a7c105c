use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use pfl_cli::config::ExperimentConfig;
use pfl_cli::presets::{desk_scale, preset};
use pfl_cli::runner::{resolve_out_dir, run_experiment, RunOptions, OUT_DIR_ENV};
use pfl_cli::oracles;

#[derive(Parser)]
#[command(name = "pfl", version, about = "Personalized federated learning optimization workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (condition, objective, optimizer, seed) in a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; defaults to the number of CPUs.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, env = OUT_DIR_ENV)]
        out: Option<PathBuf>,
    },
    /// Write a named experiment config as JSON.
    Preset {
        name: String,
        #[arg(long)]
        emit: PathBuf,
        /// Shrink to 100 samples, 10 clients and 10 seeds.
        #[arg(long)]
        desk: bool,
    },
    /// Run the gradient, smoothness, sampling and reduction checks.
    Verify {
        /// Use the full sample sizes (slower).
        #[arg(long)]
        full: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, workers, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let options = RunOptions {
                workers: workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
                out_dir: resolve_out_dir(out, &cfg),
            };
            let manifest = run_experiment(&cfg, &options)?;
            let failed: Vec<_> = manifest.failures().collect();
            println!(
                "{}: {} runs, {} failed, output in {}",
                manifest.experiment,
                manifest.runs.len(),
                failed.len(),
                options.out_dir.join(&cfg.name).display()
            );
            for f in &failed {
                eprintln!(
                    "failed: {}/{}/{} seed {}: {}",
                    f.condition,
                    f.objective,
                    f.optimizer,
                    f.seed,
                    f.error.as_deref().unwrap_or("unknown error")
                );
            }
            Ok(if failed.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Preset { name, emit, desk } => {
            let mut cfg = preset(&name)?;
            if desk {
                cfg = desk_scale(cfg, 100, 10, 10);
            }
            std::fs::write(&emit, cfg.to_json()).with_context(|| format!("writing {}", emit.display()))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { full } => {
            let checks = oracles::suite(full)?;
            for c in &checks {
                println!("{c}");
            }
            Ok(if checks.iter().all(|c| c.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
