//! `smorm-lab`: data generation, training, verification and policy
//! optimization experiments from one TOML config.
//!
//! Every command writes an output directory holding the resolved config,
//! its outputs and a `run.json` log with each output's SHA-256.

pub mod artifact;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use smorm_core::model::TrainingMode;

pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    GenData,
    Train,
    Verify,
    Bon,
    Ppo,
    Sweep,
    Report,
}

#[derive(Debug, Parser)]
#[command(name = "smorm-lab", version = concat!(env!("CARGO_PKG_VERSION"), " (", env!("SMORM_LAB_GIT_DESCRIBE"), ")"))]
pub struct Args {
    pub command: Command,
    /// TOML config; defaults apply to every missing key.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.mode`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Overrides both `bon.strategy` and `ppo.strategy`.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Directory of `gen-data` output to read instead of generating data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model checkpoint; repeat for ensemble members. `verify` also accepts
    /// `population`.
    #[arg(long)]
    pub checkpoint: Vec<String>,
    /// Run directories merged by `report`.
    #[arg(long, num_args = 1..)]
    pub runs: Vec<PathBuf>,
}

/// Reads the config and applies command-line overrides.
pub fn resolve_config(args: &Args) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = &args.mode {
        cfg.train.mode = m.parse::<TrainingMode>()?;
    }
    if let Some(s) = &args.strategy {
        cfg.bon.strategy = s.clone();
        cfg.ppo.strategy = s.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("SMORM_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::config(format!(
            "SMORM_LAB_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Runs one command; returns the output directory.
pub fn run(args: &Args) -> Result<PathBuf> {
    init_threads()?;
    let cfg = resolve_config(args)?;
    let out = &args.out;
    let data = args.data.as_deref();
    match args.command {
        Command::GenData => commands::cmd_gen_data(&cfg, out),
        Command::Train => commands::cmd_train(&cfg, out, data),
        Command::Verify => {
            if args.checkpoint.len() > 1 {
                return Err(CliError::config("verify takes at most one --checkpoint"));
            }
            commands::cmd_verify(&cfg, out, data, args.checkpoint.first().map(String::as_str))
        }
        Command::Bon => commands::cmd_bon(&cfg, out, data, &args.checkpoint),
        Command::Ppo => commands::cmd_ppo(&cfg, out, data, &args.checkpoint),
        Command::Sweep => commands::cmd_sweep(&cfg, out, data),
        Command::Report => commands::cmd_report(&cfg, out, &args.runs),
    }
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
