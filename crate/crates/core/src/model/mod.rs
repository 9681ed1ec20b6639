//! The pairwise comparing network and everything needed to train it.

mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod network;
mod optim;
mod select;
mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{
    check_gradients, loss_gradient, GradCheckConfig, GradCheckReport, GradMismatch,
};
pub use layers::{FeatureMap, BN_EPS, BN_MOMENTUM};
pub use loss::{bce, loss, pair_loss, LossWeights, PairLoss, PROB_CLAMP};
pub use network::{sigmoid, Layout, Mode, ModelOutput, ModelParams, Tape, TensorInfo, MIN_FRAMES};
pub use optim::{Optimizer, OptimizerKind};
pub use select::{correlation_sum, select_best, select_checkpoint, Candidate, Selection};
pub use train::{
    evaluate_loss, pair_accuracy, train, Checkpoint, EpochLog, TrainConfig, TrainLog, TrainOutcome};

use crate::error::{Error, Result};
use crate::features::{MelSpec, DEFAULT_N_MELS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Residual blocks in each of the four stages.
    pub block_counts: [usize; 4],
    /// Filters of the stem; stage `s` has `base_channels << s`.
    pub base_channels: usize,
    pub n_mels: usize,
    pub desk_profile: bool,
}

impl ModelConfig {
    /// Full-size network: [3, 4, 6, 3] blocks, 32 base filters.
    pub fn full() -> Self {
        Self {
            block_counts: [3, 4, 6, 3],
            base_channels: 32,
            n_mels: DEFAULT_N_MELS,
            desk_profile: false,
        }
    }

    /// One block per stage and 8 base filters, small enough to train on a
    /// laptop core.
    pub fn desk() -> Self {
        Self {
            block_counts: [1, 1, 1, 1],
            base_channels: 8,
            n_mels: DEFAULT_N_MELS,
            desk_profile: true,
        }
    }

    pub fn with_n_mels(mut self, n_mels: usize) -> Self {
        self.n_mels = n_mels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_counts.contains(&0) {
            return Err(Error::Config(format!(
                "every stage needs at least one block, got {:?}",
                self.block_counts
            )));
        }
        if self.base_channels == 0 || self.n_mels == 0 {
            return Err(Error::Config("base_channels and n_mels must be positive".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Stacks two spectrograms as the channels of one input. The shorter one is
/// padded along time with its silence-floor value.
pub fn fuse(x1: &MelSpec, x2: &MelSpec) -> Result<FeatureMap> {
    let n = x1.n_mels();
    if x2.n_mels() != n {
        return Err(Error::Shape(format!(
            "cannot fuse spectrograms with {} and {} mel bands",
            n,
            x2.n_mels()
        )));
    }
    let t = x1.n_frames().max(x2.n_frames());
    let mut data = Vec::with_capacity(2 * t * n);
    for x in [x1, x2] {
        data.extend_from_slice(&x.data.data);
        data.resize(data.len() + (t - x.n_frames()) * n, x.floor_value());
    }
    Ok(FeatureMap { c: 2, h: t, w: n, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Matrix;

    fn spec(t: usize, n: usize, v: f64) -> MelSpec {
        MelSpec {
            data: Matrix { rows: t, cols: n, data: vec![v; t * n] },
            frame_hop_s: 0.016,
            floor_eps: 1e-10,
        }
    }

    #[test]
    fn fuse_shapes_and_padding() {
        let a = spec(61, 120, 1.0);
        let f = fuse(&a, &a).unwrap();
        assert_eq!(f.shape(), (2, 61, 120));
        assert_eq!(f.plane(0), f.plane(1));

        let short = spec(50, 120, 2.0);
        let f = fuse(&short, &a).unwrap();
        assert_eq!(f.shape(), (2, 61, 120));
        let floor = 1e-10f64.ln();
        assert_eq!(f.plane(0)[50 * 120 - 1], 2.0);
        assert!(f.plane(0)[50 * 120..].iter().all(|&v| v == floor));

        assert!(matches!(fuse(&a, &spec(61, 24, 0.0)), Err(Error::Shape(_))));
    }

    #[test]
    fn profiles() {
        assert_eq!(ModelConfig::full().block_counts, [3, 4, 6, 3]);
        assert!(ModelConfig { block_counts: [1, 0, 1, 1], ..ModelConfig::desk() }.validate().is_err());
    }
}
