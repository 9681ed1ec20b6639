//! End-to-end recipes: train on a labeled system set and pick a checkpoint,
//! or sweep the pair-cleaning threshold.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audio::SystemSet;
use crate::comparators::ModelComparator;
use crate::error::{Error, Result};
use crate::features::FeatureBank;
use crate::metrics::CorrelationReport;
use crate::model::{select_checkpoint, train, Checkpoint, Selection, TrainConfig, TrainOutcome};
use crate::pairs::{build_pairs, split_validation, PairSet, Split, DEFAULT_DELTA};
use crate::ranking::{ecs_rank_with_jobs, ScoringStrategy};
use crate::seed::SeedSplitter;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub delta: f64,
    /// Utterances held out for validation.
    pub n_val: usize,
    pub train: TrainConfig,
    /// Scoring used to rank validation systems during selection.
    pub strategy: ScoringStrategy,
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            n_val: 8,
            train: TrainConfig::default(),
            strategy: ScoringStrategy::Nbs,
            jobs: 1,
        }
    }
}

pub struct TrainedModel {
    pub outcome: TrainOutcome,
    pub selection: Selection,
    pub train_pairs: PairSet,
    pub val_pairs: PairSet,
    pub val_set: SystemSet,
}

impl TrainedModel {
    pub fn selected(&self) -> &Checkpoint {
        &self.outcome.checkpoints[self.selection.index]
    }
}

/// Splits off validation utterances, builds cleaned pairs, trains and
/// selects the checkpoint that ranks the validation systems best.
pub fn train_on_set(set: &SystemSet, bank: &FeatureBank, cfg: &PipelineConfig) -> Result<TrainedModel> {
    fit(set, bank, cfg, None)
}

/// Like [`train_on_set`], but the training pairs come from a manifest.
/// Manifest pairs on validation utterances are dropped.
pub fn train_on_pairs(
    set: &SystemSet,
    pairs: &PairSet,
    bank: &FeatureBank,
    cfg: &PipelineConfig,
) -> Result<TrainedModel> {
    fit(set, bank, cfg, Some(pairs))
}

fn fit(
    set: &SystemSet,
    bank: &FeatureBank,
    cfg: &PipelineConfig,
    manifest: Option<&PairSet>,
) -> Result<TrainedModel> {
    if !set.has_mos() {
        return Err(Error::Label("training needs MOS labels".into()));
    }
    let split_seed = SeedSplitter::new(cfg.train.seed).child_seed("validation");
    let (train_set, val_set) = split_validation(set, cfg.n_val, split_seed)?;
    let train_pairs = match manifest {
        None => build_pairs(&train_set, cfg.delta)?,
        Some(m) => {
            let held_out: HashSet<&str> = val_set.utterance_ids().iter().map(String::as_str).collect();
            PairSet {
                pairs: m
                    .pairs
                    .iter()
                    .filter(|p| !held_out.contains(p.utterance_id.as_str()))
                    .cloned()
                    .collect(),
                delta: m.delta,
                split: Split::Train,
            }
        }
    };
    let val_pairs = build_pairs(&val_set, cfg.delta)?.with_split(Split::Validation);
    if train_pairs.is_empty() {
        return Err(Error::Config(format!(
            "no training pair differs by more than delta = {}",
            cfg.delta
        )));
    }
    let outcome = train(&train_pairs, &val_pairs, bank, Some(&val_set), &cfg.train)?;
    let selection = select_checkpoint(&outcome.checkpoints, &val_set, bank, cfg.strategy, cfg.jobs)?;
    Ok(TrainedModel { outcome, selection, train_pairs, val_pairs, val_set })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub train_pairs: usize,
    /// Held-out correlations; absent when undefined.
    pub report: Option<CorrelationReport>,
}

/// Trains one model per threshold with a shared seed and scores each on
/// `test_set` by ECS ranking.
pub fn sweep_delta(
    set: &SystemSet,
    test_set: &SystemSet,
    bank: &FeatureBank,
    deltas: &[f64],
    cfg: &PipelineConfig,
) -> Result<Vec<SweepRow>> {
    if deltas.is_empty() {
        return Err(Error::Config("no thresholds to sweep".into()));
    }
    let mos = test_set.mean_mos()?;
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let run_cfg = PipelineConfig { delta, ..cfg.clone() };
        let trained = train_on_set(set, bank, &run_cfg)?;
        let cmp = ModelComparator::with_bank(
            Arc::new(trained.selected().params.clone()),
            bank.clone(),
            format!("delta {delta}"),
        )?;
        let ranking = ecs_rank_with_jobs(test_set, &cmp, cfg.strategy, cfg.jobs)?;
        let report = match CorrelationReport::compute(&ranking.scores, &mos) {
            Ok(r) => Some(r),
            Err(Error::UndefinedCorrelation(_)) => None,
            Err(e) => return Err(e),
        };
        rows.push(SweepRow {
            delta,
            train_pairs: trained.train_pairs.len(),
            report,
        });
    }
    Ok(rows)
}
