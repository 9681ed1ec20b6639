//! Central finite-difference verification of the backward pass.

use super::layers::FeatureMap;
use super::loss::{pair_loss, LossWeights};
use super::network::{Mode, ModelParams, Tape};
use crate::error::{Error, Result};
use crate::pairs::LabeledPair;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Smallest step tried when a perturbation flips a ReLU.
    pub min_step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Check every `stride`-th parameter; 1 checks all of them.
    pub stride: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            min_step: 1e-9,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub index: usize,
    pub tensor: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub mismatches: Vec<GradMismatch>,
    /// Parameters whose step had to shrink to avoid a ReLU kink.
    pub kink_retries: usize,
    pub max_abs_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn batch_loss(tape: &Tape, pairs: &[LabeledPair], w: LossWeights) -> f64 {
    let total: f64 = tape.outputs.iter().zip(pairs).map(|(o, p)| pair_loss(o, p, w).total).sum();
    total / pairs.len() as f64
}

/// Analytic gradient of the mean pair loss over one training-mode batch.
pub fn loss_gradient(
    params: &ModelParams,
    inputs: &[FeatureMap],
    pairs: &[LabeledPair],
    w: LossWeights,
) -> Result<(f64, Vec<f64>)> {
    if inputs.len() != pairs.len() || inputs.is_empty() {
        return Err(Error::Shape("need one labeled pair per input".into()));
    }
    let tape = params.forward(inputs, Mode::Train)?;
    let scale = 1.0 / pairs.len() as f64;
    let d_out: Vec<[f64; 3]> = tape
        .outputs
        .iter()
        .zip(pairs)
        .map(|(o, p)| pair_loss(o, p, w).d_out.map(|g| g * scale))
        .collect();
    Ok((batch_loss(&tape, pairs, w), params.backward(&tape, &d_out)?))
}

/// Compares the analytic gradient of every trainable parameter with a
/// central difference. Only units downstream of the perturbed parameter
/// are recomputed.
pub fn check_gradients(
    params: &ModelParams,
    inputs: &[FeatureMap],
    pairs: &[LabeledPair],
    w: LossWeights,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_gradient(params, inputs, pairs, w)?;
    let base = params.forward(inputs, Mode::Train)?;
    let mut work = params.clone();
    let tensors = params.layout().tensors().to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        mismatches: Vec::new(),
        kink_retries: 0,
        max_abs_err: 0.0,
    };
    for t in tensors.iter().filter(|t| !t.running) {
        for j in t.range().filter(|j| j % cfg.stride.max(1) == 0) {
            let unit = params.layout().unit_of_weight(j);
            let entry = base.unit_input(unit);
            let w0 = params.weights()[j];
            let mut h = cfg.step;
            let numeric = loop {
                work.weights_mut()[j] = w0 + h;
                let plus = work.forward_from(unit, entry.to_vec(), Mode::Train)?;
                work.weights_mut()[j] = w0 - h;
                let minus = work.forward_from(unit, entry.to_vec(), Mode::Train)?;
                work.weights_mut()[j] = w0;
                let d = (batch_loss(&plus, pairs, w) - batch_loss(&minus, pairs, w)) / (2.0 * h);
                if plus.relu_pattern() == minus.relu_pattern() || h / 10.0 < cfg.min_step {
                    break d;
                }
                report.kink_retries += 1;
                h /= 10.0;
            };
            let a = analytic[j];
            let err = (a - numeric).abs();
            report.max_abs_err = report.max_abs_err.max(err);
            if err > (cfg.rel_tol * a.abs().max(numeric.abs())).max(cfg.abs_tol) {
                report.mismatches.push(GradMismatch {
                    index: j,
                    tensor: t.name.clone(),
                    analytic: a,
                    numeric,
                });
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
