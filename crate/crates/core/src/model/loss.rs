//! Multi-task objective: binary cross-entropy on the comparative score plus
//! squared error on the two MOS estimates.

use serde::{Deserialize, Serialize};

use super::network::ModelOutput;
use crate::comparators::ComparisonResult;
use crate::error::{Error, Result};
use crate::pairs::LabeledPair;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.5 }
    }
}

pub fn bce(p: f64, target: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Loss of one pair and its gradient with respect to the raw outputs
/// `(logit, mos1, mos2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss {
    pub total: f64,
    pub cp: f64,
    pub sc: f64,
    pub d_out: [f64; 3],
}

pub fn pair_loss(out: &ModelOutput, pair: &LabeledPair, w: LossWeights) -> PairLoss {
    let y = pair.target_f64();
    let p = out.score_cp;
    let cp = bce(p, y);
    let e1 = out.mos_pre[0] - pair.mos_a;
    let e2 = out.mos_pre[1] - pair.mos_b;
    let sc = 0.5 * (e1 * e1 + e2 * e2);
    // the clamp is flat outside its range, so is the loss
    let d_logit = if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        w.alpha * (p - y)
    } else {
        0.0
    };
    PairLoss {
        total: w.alpha * cp + w.beta * sc,
        cp,
        sc,
        d_out: [d_logit, w.beta * e1, w.beta * e2],
    }
}

/// Loss of a comparison result against a labeled pair.
pub fn loss(result: &ComparisonResult, pair: &LabeledPair, alpha: f64, beta: f64) -> Result<f64> {
    let (Some(m1), Some(m2)) = (result.mos_pre_1, result.mos_pre_2) else {
        return Err(Error::Label("loss needs both MOS predictions".into()));
    };
    let cp = bce(result.score_cp, pair.target_f64());
    let sc = 0.5 * ((m1 - pair.mos_a).powi(2) + (m2 - pair.mos_b).powi(2));
    Ok(alpha * cp + beta * sc)
}
