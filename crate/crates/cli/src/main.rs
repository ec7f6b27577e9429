//! Single entry point orchestrating data generation, training, inversion,
//! evaluation, and model comparison from config files.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dive", version, about = "Diffusion-model inversion experiments")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override (env DIVE_OUT takes precedence).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Per-image fan-out width; results are independent of this value.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Dotted-path config overrides, e.g. --set invert.lr=0.02.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (detection or classification).
    GenData,
    /// Train the conditional denoiser on the configured dataset.
    TrainCond,
    /// Train the label-space prior against a layout-conditional checkpoint.
    TrainPrior,
    /// Invert a layout-conditional model over a detection test set.
    Invert,
    /// Classify a test set by inversion or enumeration.
    Classify,
    /// Compute metrics for a predictions file.
    Eval,
    /// Rank models by their discriminative score on a shared test set.
    CompareModels,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut sets = cli.sets.clone();
    if let Some(seed) = cli.seed {
        sets.push(format!("seed={seed}"));
    }
    if let Some(out) = &cli.out {
        sets.push(format!("out=\"{}\"", out.display()));
    }
    if let Some(workers) = cli.workers {
        sets.push(format!("workers={workers}"));
    }
    let cfg = config::parse_config(cli.config.as_deref(), &sets)?;

    if let Some(workers) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .context("configuring worker pool")?;
    }

    let out = commands::out_dir(&cfg)?;
    std::fs::create_dir_all(&out)?;
    config::echo_resolved(&cfg, &out)?;

    match cli.command {
        Command::GenData => commands::gen_data(&cfg, &out),
        Command::TrainCond => commands::train_cond(&cfg, &out),
        Command::TrainPrior => commands::train_prior_cmd(&cfg, &out),
        Command::Invert => commands::invert_cmd(&cfg, &out),
        Command::Classify => commands::classify_cmd(&cfg, &out),
        Command::Eval => commands::eval_cmd(&cfg, &out),
        Command::CompareModels => commands::compare_models_cmd(&cfg, &out),
    }
}
