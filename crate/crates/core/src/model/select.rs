//! Choosing among retained checkpoints by how well each one ranks the
//! validation systems.

use std::sync::Arc;

use super::train::Checkpoint;
use crate::audio::SystemSet;
use crate::comparators::{Comparator, ModelComparator};
use crate::error::{Error, Result};
use crate::features::FeatureBank;
use crate::metrics::CorrelationReport;
use crate::ranking::{ecs_rank_with_jobs, ScoringStrategy};

/// LCC + SRCC + KRCC of an ECS ranking of `set` against its mean MOS.
/// An undefined correlation (e.g. every system tied) yields `-inf`, so such
/// a ranking never wins a selection.
pub fn correlation_sum(
    set: &SystemSet,
    cmp: &dyn Comparator,
    strategy: ScoringStrategy,
    jobs: usize,
) -> Result<f64> {
    let ranking = ecs_rank_with_jobs(set, cmp, strategy, jobs)?;
    let mos = set.mean_mos()?;
    match CorrelationReport::compute(&ranking.scores, &mos) {
        Ok(report) => Ok(report.sum()),
        Err(Error::UndefinedCorrelation(_)) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

pub struct Candidate<'a> {
    pub comparator: &'a dyn Comparator,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    /// Correlation sum per candidate; empty when there was only one.
    pub sums: Vec<f64>,
}

/// Index of the candidate with the highest validation correlation sum.
/// Ties go to the lower validation loss, then to the earlier candidate.
pub fn select_best(
    candidates: &[Candidate<'_>],
    val_set: &SystemSet,
    strategy: ScoringStrategy,
    jobs: usize,
) -> Result<Selection> {
    match candidates.len() {
        0 => return Err(Error::Config("no checkpoints to choose from".into())),
        1 => return Ok(Selection { index: 0, sums: Vec::new() }),
        _ => {}
    }
    if !val_set.has_mos() {
        return Err(Error::Label("checkpoint selection needs validation MOS".into()));
    }
    let sums = candidates
        .iter()
        .map(|c| correlation_sum(val_set, c.comparator, strategy, jobs))
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for i in 1..candidates.len() {
        let better = match sums[i].total_cmp(&sums[best]) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Equal => candidates[i].val_loss < candidates[best].val_loss,
            std::cmp::Ordering::Less => false,
        };
        if better {
            best = i;
        }
    }
    Ok(Selection { index: best, sums })
}

/// [`select_best`] over trained checkpoints, comparing with each
/// checkpoint's network on the features in `bank`.
pub fn select_checkpoint(
    checkpoints: &[Checkpoint],
    val_set: &SystemSet,
    bank: &FeatureBank,
    strategy: ScoringStrategy,
    jobs: usize,
) -> Result<Selection> {
    let comparators = checkpoints
        .iter()
        .map(|c| {
            ModelComparator::with_bank(
                Arc::new(c.params.clone()),
                bank.clone(),
                format!("epoch {}", c.epoch),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let candidates: Vec<Candidate<'_>> = comparators
        .iter()
        .zip(checkpoints)
        .map(|(cmp, c)| Candidate { comparator: cmp, val_loss: c.val_loss })
        .collect();
    select_best(&candidates, val_set, strategy, jobs)
}
