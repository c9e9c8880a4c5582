//! Flat TOML run configuration.
//!
//! Precedence: built-in defaults, then the config file, then `--set
//! key=value` overrides, then dedicated command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use din_ctr::{ModelConfig, SplitMode, SyntheticConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Din,
    Base,
}

impl ModelKind {
    pub fn use_attention(self) -> bool {
        self == ModelKind::Din
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Validation,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub num_users: usize,
    pub num_items: usize,
    pub num_clusters: usize,
    pub min_behaviors: usize,
    pub max_behaviors: usize,
    pub impressions: usize,
    pub alpha: f64,
    pub base_logit: f64,
    pub gamma: f64,
    pub days: u32,
    pub start_ts: i64,

    pub model: ModelKind,
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub max_seq_len: usize,
    pub temperature: f64,
    pub user_profile: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2_lambda: f64,
    /// 0 disables early stopping.
    pub patience: usize,
    pub split: SplitMode,
    pub validation_fraction: f64,
    pub eval_split: EvalSplit,
    pub record_wall_time: bool,

    pub dataset: PathBuf,
    pub metadata: PathBuf,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub report: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let syn = SyntheticConfig::default();
        let train = TrainConfig::default();
        let model = ModelConfig::new(2, 2);
        Self {
            seed: syn.seed,
            num_users: syn.num_users,
            num_items: syn.num_items,
            num_clusters: syn.num_clusters,
            min_behaviors: syn.min_behaviors,
            max_behaviors: syn.max_behaviors,
            impressions: syn.impressions,
            alpha: syn.alpha,
            base_logit: syn.base_logit,
            gamma: syn.gamma,
            days: syn.days,
            start_ts: syn.start_ts,
            model: ModelKind::Din,
            embedding_dim: model.embedding_dim,
            hidden: model.hidden,
            max_seq_len: model.max_seq_len,
            temperature: model.temperature,
            user_profile: model.use_user_profile,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.lr,
            l2_lambda: train.l2_lambda,
            patience: 0,
            split: SplitMode::Temporal,
            validation_fraction: 0.2,
            eval_split: EvalSplit::Validation,
            record_wall_time: true,
            dataset: "data.jsonl".into(),
            metadata: "data.meta.json".into(),
            checkpoint: "model.ckpt".into(),
            history: "history.csv".into(),
            report: "report.json".into(),
        }
    }
}

/// Parses a `--set` value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Resolves file and `key=value` overrides on top of the defaults.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for (key, raw) in overrides {
            table.insert(key.clone(), parse_value(raw));
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic().validate()?;
        self.train_config().validate()?;
        if self.embedding_dim == 0 || self.max_seq_len == 0 || self.hidden.contains(&0) {
            bail!("invalid config: model dimensions must be positive");
        }
        if !(self.temperature > 0.0) {
            bail!("invalid config: temperature must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            bail!("invalid config: validation_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            num_users: self.num_users,
            num_items: self.num_items,
            num_clusters: self.num_clusters,
            min_behaviors: self.min_behaviors,
            max_behaviors: self.max_behaviors,
            impressions: self.impressions,
            alpha: self.alpha,
            base_logit: self.base_logit,
            gamma: self.gamma,
            days: self.days,
            start_ts: self.start_ts,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            l2_lambda: self.l2_lambda,
            seed: self.seed,
            patience: (self.patience > 0).then_some(self.patience),
        }
    }

    pub fn model_config(&self, item_vocab_size: usize, user_vocab_size: usize) -> ModelConfig {
        ModelConfig {
            item_vocab_size,
            user_vocab_size,
            embedding_dim: self.embedding_dim,
            hidden: self.hidden.clone(),
            max_seq_len: self.max_seq_len,
            temperature: self.temperature,
            use_attention: self.model.use_attention(),
            use_user_profile: self.user_profile,
        }
    }

    /// Errors when a checkpoint was built with a different architecture.
    pub fn check_checkpoint(&self, ckpt: &ModelConfig) -> Result<()> {
        let mut diffs = Vec::new();
        if ckpt.embedding_dim != self.embedding_dim {
            diffs.push(format!(
                "embedding_dim {} vs {}",
                ckpt.embedding_dim, self.embedding_dim
            ));
        }
        if ckpt.hidden != self.hidden {
            diffs.push(format!("hidden {:?} vs {:?}", ckpt.hidden, self.hidden));
        }
        if ckpt.max_seq_len != self.max_seq_len {
            diffs.push(format!(
                "max_seq_len {} vs {}",
                ckpt.max_seq_len, self.max_seq_len
            ));
        }
        if ckpt.use_user_profile != self.user_profile {
            diffs.push(format!(
                "user_profile {} vs {}",
                ckpt.use_user_profile, self.user_profile
            ));
        }
        if !diffs.is_empty() {
            bail!(
                "checkpoint/model-config mismatch (checkpoint vs config): {}",
                diffs.join(", ")
            );
        }
        Ok(())
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
