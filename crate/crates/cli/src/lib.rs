//! The `ctr` command line: generate, train, eval, predict, rank and
//! gradcheck over one shared run configuration.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::config::{parse_override, ModelKind, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "ctr",
    version,
    about = "Attention-pooled CTR model: data, training, evaluation and ad ranking"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset and its ground-truth metadata.
    Generate(Common),
    /// Split, encode and train; writes the checkpoint and history CSV.
    Train(Common),
    /// Evaluate a checkpoint on the configured split.
    Eval(EvalArgs),
    /// Click probability for each query record.
    Predict(PredictArgs),
    /// Order candidate ads by eCPM.
    Rank(RankArgs),
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck(Common),
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, String)>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_model_kind)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Evaluate two checkpoints side by side and print a CSV table.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub compare: Option<Vec<PathBuf>>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    /// Query JSONL: user_id, ad_id, behavior_ids; label optional.
    #[arg(long)]
    pub input: PathBuf,
    /// Output JSONL; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub common: Common,
    /// Candidate JSONL: user_id, ad_id, behavior_ids, bid.
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn parse_model_kind(s: &str) -> std::result::Result<ModelKind, String> {
    match s {
        "din" => Ok(ModelKind::Din),
        "base" => Ok(ModelKind::Base),
        other => Err(format!("unknown model {other:?}; expected din or base")),
    }
}

impl Common {
    /// Defaults, then file, then `--set`, then dedicated flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.model {
            c.model = v;
        }
        if let Some(v) = &self.dataset {
            c.dataset = v.clone();
        }
        if let Some(v) = &self.metadata {
            c.metadata = v.clone();
        }
        if let Some(v) = &self.checkpoint {
            c.checkpoint = v.clone();
        }
        if let Some(v) = &self.history {
            c.history = v.clone();
        }
        if let Some(v) = &self.report {
            c.report = v.clone();
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Runs one subcommand. `Ok(false)` means it completed but failed its
/// check (gradcheck over threshold).
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<bool> {
    match &cli.command {
        Command::Generate(c) => commands::generate(&c.resolve()?, out).map(|_| true),
        Command::Train(c) => commands::train(&c.resolve()?, out).map(|_| true),
        Command::Eval(a) => {
            let cfg = a.common.resolve()?;
            match &a.compare {
                Some(paths) => commands::compare(&cfg, &paths[0], &paths[1], out),
                None => commands::eval(&cfg, out),
            }
            .map(|_| true)
        }
        Command::Predict(a) => {
            commands::predict(&a.common.resolve()?, &a.input, a.output.as_deref(), out).map(|_| true)
        }
        Command::Rank(a) => {
            commands::rank(&a.common.resolve()?, &a.candidates, a.output.as_deref(), out).map(|_| true)
        }
        Command::Gradcheck(c) => commands::gradcheck(&c.resolve()?, out),
    }
}
