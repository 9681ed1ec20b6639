//! Mini-batch training on labeled pairs with validation-loss checkpointing.

use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{pair_loss, LossWeights};
use super::network::{Mode, ModelParams};
use super::optim::{Optimizer, OptimizerKind};
use super::select::correlation_sum;
use super::{fuse, FeatureMap, ModelConfig};
use crate::audio::SystemSet;
use crate::comparators::ModelComparator;
use crate::error::{Error, Result};
use crate::features::FeatureBank;
use crate::pairs::{LabeledPair, PairSet};
use crate::ranking::ScoringStrategy;
use crate::seed::SeedSplitter;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Checkpoints retained, ranked by validation loss.
    pub keep: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub model: ModelConfig,
    /// Scoring used when ranking validation systems each epoch.
    pub val_strategy: ScoringStrategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            lr: 1e-4,
            weight_decay: 1e-6,
            epochs: 30,
            alpha: 0.5,
            beta: 0.5,
            keep: 9,
            optimizer: OptimizerKind::AdamW,
            seed: 0,
            model: ModelConfig::desk(),
            val_strategy: ScoringStrategy::Nbs,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.keep == 0 {
            return Err(Error::Config("batch_size, epochs and keep must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("weight decay and loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation LCC + SRCC + KRCC, absent without a validation system set
    /// or when a correlation is undefined.
    pub val_corr_sum: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss of the initial parameters, measured the same way
    /// as the per-epoch training loss.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub val_loss: f64,
    pub params: ModelParams,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best first by validation loss.
    pub checkpoints: Vec<Checkpoint>,
    pub log: TrainLog,
    pub last: ModelParams,
}

fn fused_batch(pairs: &[&LabeledPair], bank: &FeatureBank) -> Result<Vec<FeatureMap>> {
    pairs
        .iter()
        .map(|p| {
            fuse(
                bank.require(&p.system_a, &p.utterance_id)?,
                bank.require(&p.system_b, &p.utterance_id)?,
            )
        })
        .collect()
}

/// Mean loss over `pairs` in inference mode.
pub fn evaluate_loss(
    params: &ModelParams,
    pairs: &[LabeledPair],
    bank: &FeatureBank,
    weights: LossWeights,
    chunk: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Config("no pairs to evaluate".into()));
    }
    let mut total = 0.0;
    let refs: Vec<&LabeledPair> = pairs.iter().collect();
    for batch in refs.chunks(chunk.max(1)) {
        let tape = params.forward(&fused_batch(batch, bank)?, Mode::Eval)?;
        for (out, p) in tape.outputs.iter().zip(batch) {
            total += pair_loss(out, p, weights).total;
        }
    }
    Ok(total / pairs.len() as f64)
}

/// Fraction of pairs whose predicted winner matches the label.
pub fn pair_accuracy(params: &ModelParams, pairs: &[LabeledPair], bank: &FeatureBank) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Config("no pairs to evaluate".into()));
    }
    let mut right = 0usize;
    for p in pairs {
        let out = params.predict(&fuse(
            bank.require(&p.system_a, &p.utterance_id)?,
            bank.require(&p.system_b, &p.utterance_id)?,
        )?)?;
        if (out.score_cp > 0.5) == (p.target == 1) {
            right += 1;
        }
    }
    Ok(right as f64 / pairs.len() as f64)
}

/// Trains a fresh network on `train_pairs`.
///
/// After every epoch the validation loss decides which checkpoints are
/// retained; with `val_set` the validation systems are also ranked and the
/// correlation sum logged. Shuffling and initialization derive from
/// `cfg.seed`, and every reduction runs in a fixed order, so equal inputs
/// give bit-identical parameters.
pub fn train(
    train_pairs: &PairSet,
    val_pairs: &PairSet,
    bank: &FeatureBank,
    val_set: Option<&SystemSet>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::Config("training pair set is empty".into()));
    }
    if bank.config().n_mels != cfg.model.n_mels {
        return Err(Error::Config(format!(
            "features have {} mel bands, model expects {}",
            bank.config().n_mels,
            cfg.model.n_mels
        )));
    }
    let seeds = SeedSplitter::new(cfg.seed);
    let mut params = ModelParams::new(cfg.model.clone(), seeds.child_seed("model"))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay, params.num_weights());
    let weights = cfg.loss_weights();
    let n = train_pairs.len();

    let order_for = |epoch: usize| {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeds.rng(&format!("shuffle/{epoch}")));
        order
    };

    // initial loss: epoch-1 batches in training mode, no updates
    let mut initial = 0.0;
    let first = order_for(1);
    for idx in first.chunks(cfg.batch_size) {
        let batch: Vec<&LabeledPair> = idx.iter().map(|&i| &train_pairs.pairs[i]).collect();
        let tape = params.forward(&fused_batch(&batch, bank)?, Mode::Train)?;
        for (out, p) in tape.outputs.iter().zip(&batch) {
            initial += pair_loss(out, p, weights).total;
        }
    }
    let initial_train_loss = initial / n as f64;
    info!("initial training loss {initial_train_loss:.5}");

    let mut log = TrainLog { initial_train_loss, epochs: Vec::new() };
    let mut kept: Vec<Checkpoint> = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for idx in order_for(epoch).chunks(cfg.batch_size) {
            let batch: Vec<&LabeledPair> = idx.iter().map(|&i| &train_pairs.pairs[i]).collect();
            let tape = params.forward(&fused_batch(&batch, bank)?, Mode::Train)?;
            let scale = 1.0 / batch.len() as f64;
            let mut d_out = Vec::with_capacity(batch.len());
            for (out, p) in tape.outputs.iter().zip(&batch) {
                let l = pair_loss(out, p, weights);
                total += l.total;
                d_out.push(l.d_out.map(|g| g * scale));
            }
            let grad = params.backward(&tape, &d_out)?;
            opt.step(params.weights_mut(), &grad);
            params.update_running_stats(&tape);
            if params.weights().iter().any(|w| !w.is_finite()) {
                return Err(Error::Numeric(format!("parameters diverged in epoch {epoch}")));
            }
        }
        let train_loss = total / n as f64;
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!("training loss diverged in epoch {epoch}")));
        }
        let val_loss = if val_pairs.is_empty() {
            train_loss
        } else {
            evaluate_loss(&params, &val_pairs.pairs, bank, weights, cfg.batch_size)?
        };
        let val_corr_sum = match val_set {
            Some(set) if set.has_mos() && set.num_systems() >= 2 => {
                let cmp = ModelComparator::with_bank(Arc::new(params.clone()), bank.clone(), "model")?;
                Some(correlation_sum(set, &cmp, cfg.val_strategy, 1)?).filter(|s| s.is_finite())
            }
            _ => None,
        };
        info!(
            "epoch {epoch}: train loss {train_loss:.5}, val loss {val_loss:.5}, val corr sum {}",
            val_corr_sum.map_or("n/a".to_string(), |s| format!("{s:.4}"))
        );
        log.epochs.push(EpochLog { epoch, train_loss, val_loss, val_corr_sum });

        kept.push(Checkpoint { epoch, val_loss, params: params.clone() });
        kept.sort_by(|a, b| a.val_loss.total_cmp(&b.val_loss).then(a.epoch.cmp(&b.epoch)));
        kept.truncate(cfg.keep);
    }
    Ok(TrainOutcome { checkpoints: kept, log, last: params })
}
