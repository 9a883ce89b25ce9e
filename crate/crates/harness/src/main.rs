use std::path::PathBuf;
use std::process::ExitCode;

use advobs_harness::commands::*;
use advobs_harness::{ExperimentConfig, HarnessError};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advobs", about = "Adversarial observations against a toy diffusion forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `paths.output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for trial matrices.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate the synthetic dataset.
    Simulate,
    /// Train the denoiser and calibrate background error and thresholds.
    Train,
    /// Run every scenario over variants x budgets.
    Attack,
    /// Mean deviation per budget with a 5-95% band.
    Sweep,
    /// Mean deviation of each variant relative to the full attack.
    Ablate,
    /// Minimum successful budget and its detection power.
    Detect,
    /// Audit and bundle outputs with the resolved config.
    Report,
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.paths.output = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let t = cli.threads;
    let meta = match cli.command {
        Command::Simulate => cmd_simulate(&cfg)?,
        Command::Train => cmd_train(&cfg)?,
        Command::Attack => cmd_attack(&cfg, t)?,
        Command::Sweep => cmd_sweep(&cfg, t)?,
        Command::Ablate => cmd_ablate(&cfg, t)?,
        Command::Detect => cmd_detect(&cfg, t)?,
        Command::Report => cmd_report(&cfg)?,
    };
    println!("{}: wrote {} ({:.1}s)", meta.command, meta.outputs.join(", "), meta.runtime_secs);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
