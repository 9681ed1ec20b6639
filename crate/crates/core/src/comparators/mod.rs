//! Anything that can judge which of two homologous clips sounds better.

mod external;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use external::{ExternalEndpoint, DEFAULT_TIMEOUT};

use crate::audio::{ClipRef, SystemSet};
use crate::error::{Error, Result};
use crate::features::{FeatureBank, LogMelExtractor, MelSpec, StftConfig};
use crate::model::{fuse, ModelParams};

/// Outcome of one pairwise comparison. `score_cp > 0.5` means the first
/// clip is judged better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub score_cp: f64,
    pub mos_pre_1: Option<f64>,
    pub mos_pre_2: Option<f64>,
}

impl ComparisonResult {
    pub fn checked(self, who: &str) -> Result<Self> {
        if !self.score_cp.is_finite() {
            return Err(Error::Numeric(format!("{who} returned a non-finite score")));
        }
        if !(0.0..=1.0).contains(&self.score_cp) {
            return Err(Error::Protocol(format!(
                "{who} returned score {} outside [0, 1]",
                self.score_cp
            )));
        }
        Ok(self)
    }
}

pub trait Comparator: Send + Sync {
    /// Label used in reports.
    fn name(&self) -> String;

    /// Called once per system set before any comparison, e.g. to warm caches.
    fn prepare(&self, _set: &SystemSet) -> Result<()> {
        Ok(())
    }

    fn compare(&self, a: &ClipRef<'_>, b: &ClipRef<'_>) -> Result<ComparisonResult>;
}

impl<C: Comparator + ?Sized> Comparator for Box<C> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn prepare(&self, set: &SystemSet) -> Result<()> {
        (**self).prepare(set)
    }

    fn compare(&self, a: &ClipRef<'_>, b: &ClipRef<'_>) -> Result<ComparisonResult> {
        (**self).compare(a, b)
    }
}

/// Ground-truth comparison of two MOS values: 1, 0, or 0.5 on a tie.
pub fn oracle_compare(mos_a: f64, mos_b: f64) -> ComparisonResult {
    let score_cp = if mos_a > mos_b {
        1.0
    } else if mos_a < mos_b {
        0.0
    } else {
        0.5
    };
    ComparisonResult {
        score_cp,
        mos_pre_1: Some(mos_a),
        mos_pre_2: Some(mos_b),
    }
}

/// Compares clips by their reference MOS labels.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleComparator;

impl Comparator for OracleComparator {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn prepare(&self, set: &SystemSet) -> Result<()> {
        if !set.has_mos() {
            return Err(Error::Label("oracle comparator needs MOS labels".into()));
        }
        Ok(())
    }

    fn compare(&self, a: &ClipRef<'_>, b: &ClipRef<'_>) -> Result<ComparisonResult> {
        let label = |c: &ClipRef<'_>| {
            c.mos.ok_or_else(|| {
                Error::Label(format!("no MOS for ({}, {})", c.system_id, c.utterance_id))
            })
        };
        Ok(oracle_compare(label(a)?, label(b)?))
    }
}

/// Averages `score(a, b)` with `1 - score(b, a)`. Doubles the cost.
pub struct Symmetrized<C>(pub C);

impl<C: Comparator> Comparator for Symmetrized<C> {
    fn name(&self) -> String {
        format!("symmetrized({})", self.0.name())
    }

    fn prepare(&self, set: &SystemSet) -> Result<()> {
        self.0.prepare(set)
    }

    fn compare(&self, a: &ClipRef<'_>, b: &ClipRef<'_>) -> Result<ComparisonResult> {
        let ab = self.0.compare(a, b)?;
        let ba = self.0.compare(b, a)?;
        let avg = |x: Option<f64>, y: Option<f64>| match (x, y) {
            (Some(x), Some(y)) => Some(0.5 * (x + y)),
            _ => None,
        };
        Ok(ComparisonResult {
            score_cp: 0.5 * (ab.score_cp + 1.0 - ba.score_cp),
            mos_pre_1: avg(ab.mos_pre_1, ba.mos_pre_2),
            mos_pre_2: avg(ab.mos_pre_2, ba.mos_pre_1),
        })
    }
}

type FeatureKey = (String, String);

/// Pairwise network comparator: log-mel both clips, stack them as
/// channels, run the network in inference mode.
pub struct ModelComparator {
    params: Arc<ModelParams>,
    extractor: LogMelExtractor,
    bank: FeatureBank,
    label: String,
    cache: Mutex<HashMap<FeatureKey, Arc<MelSpec>>>,
}

impl ModelComparator {
    pub fn new(params: Arc<ModelParams>, stft: StftConfig, label: impl Into<String>) -> Result<Self> {
        Self::with_bank(params, FeatureBank::new(stft), label)
    }

    /// A comparator that looks features up in `bank` before extracting.
    pub fn with_bank(
        params: Arc<ModelParams>,
        bank: FeatureBank,
        label: impl Into<String>,
    ) -> Result<Self> {
        let stft = *bank.config();
        if stft.n_mels != params.config().n_mels {
            return Err(Error::Config(format!(
                "front end yields {} mel bands, model expects {}",
                stft.n_mels,
                params.config().n_mels
            )));
        }
        Ok(Self {
            params,
            extractor: LogMelExtractor::new(stft, crate::audio::CANONICAL_RATE_HZ)?,
            bank,
            label: label.into(),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    fn features(&self, c: &ClipRef<'_>) -> Result<Arc<MelSpec>> {
        if let Some(f) = self.bank.get(c.system_id, c.utterance_id) {
            return Ok(f.clone());
        }
        let key = (c.system_id.to_string(), c.utterance_id.to_string());
        if let Some(f) = self.cache.lock().expect("feature cache poisoned").get(&key) {
            return Ok(f.clone());
        }
        let spec = Arc::new(self.extractor.extract(&c.clip.to_canonical()?)?);
        self.cache
            .lock()
            .expect("feature cache poisoned")
            .insert(key, spec.clone());
        Ok(spec)
    }

    /// Comparison on precomputed features.
    pub fn compare_features(&self, a: &MelSpec, b: &MelSpec) -> Result<ComparisonResult> {
        model_compare_features(&self.params, a, b)
    }
}

impl Comparator for ModelComparator {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn prepare(&self, set: &SystemSet) -> Result<()> {
        let mut cache = self.cache.lock().expect("feature cache poisoned");
        cache.clear();
        for k in 0..set.num_systems() {
            for i in 0..set.num_utterances() {
                let item = set.item(k, i)?;
                if self.bank.get(item.system_id, item.utterance_id).is_some() {
                    continue;
                }
                let spec = self.extractor.extract(&item.clip.to_canonical()?)?;
                cache.insert(
                    (item.system_id.to_string(), item.utterance_id.to_string()),
                    Arc::new(spec),
                );
            }
        }
        Ok(())
    }

    fn compare(&self, a: &ClipRef<'_>, b: &ClipRef<'_>) -> Result<ComparisonResult> {
        let (fa, fb) = (self.features(a)?, self.features(b)?);
        self.compare_features(&fa, &fb)
    }
}

pub fn model_compare_features(
    params: &ModelParams,
    a: &MelSpec,
    b: &MelSpec,
) -> Result<ComparisonResult> {
    let out = params.predict(&fuse(a, b)?)?;
    ComparisonResult {
        score_cp: out.score_cp,
        mos_pre_1: Some(out.mos_pre[0]),
        mos_pre_2: Some(out.mos_pre[1]),
    }
    .checked("model")
}

/// One-shot model comparison of two clips at the default front end.
pub fn model_compare(
    params: &ModelParams,
    clip_a: &crate::audio::AudioClip,
    clip_b: &crate::audio::AudioClip,
) -> Result<ComparisonResult> {
    let stft = StftConfig {
        n_mels: params.config().n_mels,
        ..StftConfig::default()
    };
    let extractor = LogMelExtractor::new(stft, crate::audio::CANONICAL_RATE_HZ)?;
    let fa = extractor.extract(&clip_a.to_canonical()?)?;
    let fb = extractor.extract(&clip_b.to_canonical()?)?;
    model_compare_features(params, &fa, &fb)
}
