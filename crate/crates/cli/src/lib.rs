//! Command-line plumbing around the `tangled` library.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "tangled", version, about = "Tangled video-text transformer: data, pre-training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus (train.abtd, val.abtd).
    GenData(Common),
    /// Pre-train on train.abtd; writes a checkpoint and a loss log.
    Pretrain(Common),
    /// Text-to-video retrieval on val.abtd.
    EvalRetrieval(Common),
    /// Step localization on val.abtd.
    EvalLocalize(Common),
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Extra `KEY=VALUE` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

impl Common {
    /// File values first, then dedicated flags, then `--set` pairs.
    pub fn resolve(&self) -> tangled::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = Some(seed);
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        if let Some(data) = &self.data {
            cfg.data_dir = data.clone();
        }
        if let Some(ckpt) = &self.checkpoint {
            cfg.checkpoint = ckpt.clone();
        }
        for pair in &self.sets {
            cfg.apply_override(pair)?;
        }
        Ok(cfg)
    }
}

/// Runs one command and returns what it prints on success.
pub fn run(cli: &Cli) -> tangled::Result<String> {
    match &cli.command {
        Command::GenData(c) => commands::gen_data(&c.resolve()?),
        Command::Pretrain(c) => commands::pretrain(&c.resolve()?),
        Command::EvalRetrieval(c) => Ok(commands::eval_retrieval(&c.resolve()?)?.render().trim_end().to_string()),
        Command::EvalLocalize(c) => Ok(commands::eval_localize(&c.resolve()?)?.render().trim_end().to_string()),
    }
}
