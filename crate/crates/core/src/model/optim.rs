//! First-order optimizers with decoupled weight decay.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    AdamW,
    /// Plain stochastic gradient descent with decoupled weight decay.
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adamw" | "adam" => Ok(OptimizerKind::AdamW),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, n: usize) -> Self {
        let moments = if kind == OptimizerKind::AdamW { n } else { 0 };
        Self {
            kind,
            lr,
            weight_decay,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            t: 0,
        }
    }

    pub fn step(&mut self, weights: &mut [f64], grad: &[f64]) {
        assert_eq!(weights.len(), grad.len());
        let decay = 1.0 - self.lr * self.weight_decay;
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, g) in weights.iter_mut().zip(grad) {
                    *w = *w * decay - self.lr * g;
                }
            }
            OptimizerKind::AdamW => {
                self.t += 1;
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                for (((w, g), m), v) in weights.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    let step = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    *w = *w * decay - self.lr * step;
                }
            }
        }
    }
}
