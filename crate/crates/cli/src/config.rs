//! Run configuration: command-line flags override a JSON config file,
//! which overrides the `PKRANK_SEED` environment variable (seed only),
//! which overrides built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use pkrank::error::{Error, Result};
use pkrank::experiment::PipelineConfig;
use pkrank::model::{ModelConfig, OptimizerKind};
use pkrank::ranking::ScoringStrategy;

pub const SEED_ENV: &str = "PKRANK_SEED";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub delta: Option<f64>,
    pub val_utts: Option<usize>,
    pub test_utts: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub epochs: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub keep: Option<usize>,
    pub optimizer: Option<String>,
    pub profile: Option<String>,
    pub n_mels: Option<usize>,
    pub strategy: Option<String>,
    pub jobs: Option<usize>,
    pub comparator: Option<String>,
    pub timeout_s: Option<f64>,
    pub deltas: Option<Vec<f64>>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(seed) = flag.or(self.seed) {
            return Ok(seed);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }
}

/// Training options shared by `train` and `sweep-delta`.
#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    /// JSON config file; flags take precedence over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Minimum MOS gap for a training pair.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Utterances held out for validation.
    #[arg(long)]
    pub val_utts: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Checkpoints retained.
    #[arg(long)]
    pub keep: Option<usize>,
    /// `adamw` or `sgd`.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// `desk` or `full`.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub n_mels: Option<usize>,
    /// Scoring used to rank validation systems (`bs` or `nbs`).
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

fn profile(name: &str) -> Result<ModelConfig> {
    match name {
        "desk" => Ok(ModelConfig::desk()),
        "full" => Ok(ModelConfig::full()),
        other => Err(Error::Config(format!("unknown model profile '{other}'"))),
    }
}

impl TrainFlags {
    pub fn pipeline(&self, file: &FileConfig) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        let t = &mut cfg.train;
        t.seed = file.resolve_seed(self.seed)?;
        if let Some(name) = self.profile.as_ref().or(file.profile.as_ref()) {
            t.model = profile(name)?;
        }
        if let Some(n) = self.n_mels.or(file.n_mels) {
            t.model.n_mels = n;
        }
        if let Some(o) = self.optimizer.as_ref().or(file.optimizer.as_ref()) {
            t.optimizer = o.parse::<OptimizerKind>()?;
        }
        t.batch_size = self.batch_size.or(file.batch_size).unwrap_or(t.batch_size);
        t.lr = self.lr.or(file.lr).unwrap_or(t.lr);
        t.weight_decay = self.weight_decay.or(file.weight_decay).unwrap_or(t.weight_decay);
        t.epochs = self.epochs.or(file.epochs).unwrap_or(t.epochs);
        t.alpha = self.alpha.or(file.alpha).unwrap_or(t.alpha);
        t.beta = self.beta.or(file.beta).unwrap_or(t.beta);
        t.keep = self.keep.or(file.keep).unwrap_or(t.keep);
        if let Some(s) = self.strategy.as_ref().or(file.strategy.as_ref()) {
            let s: ScoringStrategy = s.parse()?;
            t.val_strategy = s;
            cfg.strategy = s;
        }
        cfg.delta = self.delta.or(file.delta).unwrap_or(cfg.delta);
        cfg.n_val = self.val_utts.or(file.val_utts).unwrap_or(cfg.n_val);
        cfg.jobs = self.jobs.or(file.jobs).unwrap_or(cfg.jobs).max(1);
        if !(cfg.delta >= 0.0) {
            return Err(Error::Config(format!("delta must be >= 0, got {}", cfg.delta)));
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}
