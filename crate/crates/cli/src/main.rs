use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use hartree_lab::{run, Experiment, ExperimentConfig, RunError};

/// Numerical experiments for path-repellent Brownian motions in a trap.
#[derive(Parser, Debug)]
#[command(version)]
struct Cli {
    /// Experiment to run.
    #[arg(value_enum)]
    experiment: Experiment,
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set trap.w=2` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root; overrides `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn execute(cli: Cli) -> Result<PathBuf, RunError> {
    let mut overrides = cli.overrides;
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut cfg = ExperimentConfig::load(&cli.config, &overrides)?;
    if let Some(out) = cli.out {
        cfg.output = out;
    }
    Ok(run(cli.experiment, &cfg)?.dir)
}

fn main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    if let Some(k) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match execute(cli) {
        Ok(dir) => {
            println!("{}", dir.join("results.json").display());
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("error: {e}");
            Ok(ExitCode::from(e.exit_code() as u8))
        }
    }
}
