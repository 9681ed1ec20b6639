//! Enumerating-Comparing-Scoring: a round robin over every pair of systems,
//! played utterance by utterance.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::SystemSet;
use crate::comparators::Comparator;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringStrategy {
    /// Winner of each comparison takes one point. A score of exactly 0.5
    /// goes to the second system.
    Bs,
    /// The first system takes `score`, the second `1 - score`.
    Nbs,
}

impl fmt::Display for ScoringStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoringStrategy::Bs => "bs",
            ScoringStrategy::Nbs => "nbs",
        })
    }
}

impl FromStr for ScoringStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bs" | "binary" => Ok(ScoringStrategy::Bs),
            "nbs" | "non-binary" | "nonbinary" => Ok(ScoringStrategy::Nbs),
            other => Err(Error::Config(format!("unknown scoring strategy '{other}'"))),
        }
    }
}

impl ScoringStrategy {
    /// Points awarded to (first, second) for one comparison.
    pub fn award(self, score: f64) -> (f64, f64) {
        match self {
            ScoringStrategy::Bs if score > 0.5 => (1.0, 0.0),
            ScoringStrategy::Bs => (0.0, 1.0),
            ScoringStrategy::Nbs => (score, 1.0 - score),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub system_ids: Vec<String>,
    /// Accumulated points, aligned with `system_ids`.
    pub scores: Vec<f64>,
    /// Indices into `system_ids`, best first.
    pub order: Vec<usize>,
    pub strategy: ScoringStrategy,
    pub comparisons_made: u64,
    pub comparator: String,
}

/// Number of comparisons a full round robin makes: K(K-1)/2 per utterance.
pub fn comparison_count(k: usize, m: usize) -> u64 {
    let k = k as u64;
    k * k.saturating_sub(1) / 2 * m as u64
}

impl RankingResult {
    pub fn from_scores(
        system_ids: Vec<String>,
        scores: Vec<f64>,
        strategy: ScoringStrategy,
        comparisons_made: u64,
        comparator: String,
    ) -> Self {
        let mut order: Vec<usize> = (0..system_ids.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| system_ids[a].cmp(&system_ids[b]))
        });
        Self {
            system_ids,
            scores,
            order,
            strategy,
            comparisons_made,
            comparator,
        }
    }

    pub fn ordered_ids(&self) -> Vec<&str> {
        self.order.iter().map(|&k| self.system_ids[k].as_str()).collect()
    }

    /// 1-based rank of each system, aligned with `system_ids`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.order.len()];
        for (pos, &k) in self.order.iter().enumerate() {
            ranks[k] = pos + 1;
        }
        ranks
    }

    pub fn total_points(&self) -> f64 {
        self.scores.iter().sum()
    }

    /// `system_id,score,rank`, best first.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["system_id", "score", "rank"])
            .map_err(|e| Error::Format(e.to_string()))?;
        for (pos, &k) in self.order.iter().enumerate() {
            w.write_record([
                self.system_ids[k].clone(),
                format!("{}", self.scores[k]),
                (pos + 1).to_string(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// Runs the round robin serially.
pub fn ecs_rank(
    set: &SystemSet,
    cmp: &dyn Comparator,
    strategy: ScoringStrategy,
) -> Result<RankingResult> {
    ecs_rank_with_jobs(set, cmp, strategy, 1)
}

/// Runs the round robin with up to `jobs` comparator calls in flight.
/// Points are accumulated in (k, w, i) order whatever `jobs` is, so the
/// result is bit-identical to the serial run.
pub fn ecs_rank_with_jobs(
    set: &SystemSet,
    cmp: &dyn Comparator,
    strategy: ScoringStrategy,
    jobs: usize,
) -> Result<RankingResult> {
    let k = set.num_systems();
    let m = set.num_utterances();
    if k < 2 {
        return Err(Error::Config(format!("ranking needs at least 2 systems, got {k}")));
    }
    if m < 1 {
        return Err(Error::Config("ranking needs at least 1 utterance".into()));
    }
    set.ensure_complete()?;
    cmp.prepare(set)?;

    let cells: Vec<(usize, usize, usize)> = (0..k)
        .flat_map(|a| ((a + 1)..k).flat_map(move |b| (0..m).map(move |i| (a, b, i))))
        .collect();
    let name = cmp.name();
    let judge = |&(a, b, i): &(usize, usize, usize)| -> Result<f64> {
        let r = cmp.compare(&set.item(a, i)?, &set.item(b, i)?)?;
        Ok(r.checked(&name)?.score_cp)
    };

    let outcomes: Vec<f64> = if jobs <= 1 {
        cells.iter().map(judge).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
        pool.install(|| cells.par_iter().map(judge).collect::<Result<_>>())?
    };

    let mut scores = vec![0.0; k];
    for (&(a, b, _), &s) in cells.iter().zip(&outcomes) {
        let (pa, pb) = strategy.award(s);
        scores[a] += pa;
        scores[b] += pb;
    }
    Ok(RankingResult::from_scores(
        set.system_ids().to_vec(),
        scores,
        strategy,
        cells.len() as u64,
        name,
    ))
}
