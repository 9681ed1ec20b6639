//! Single-clip MOS estimation with the pairwise network, either by pairing
//! a clip with itself or with its noisy source.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, SystemSet, CANONICAL_RATE_HZ, NOISY_SYSTEM_ID};
use crate::error::{Error, Result};
use crate::features::{FeatureBank, LogMelExtractor, MelSpec, StftConfig};
use crate::model::{fuse, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SqaStrategy {
    /// The clip is paired with a copy of itself.
    Replication,
    /// The clip is paired with its noisy source, once in each position.
    NoisySpeech,
}

impl fmt::Display for SqaStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SqaStrategy::Replication => "replication",
            SqaStrategy::NoisySpeech => "noisy",
        })
    }
}

impl FromStr for SqaStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "replication" | "rep" => Ok(SqaStrategy::Replication),
            "noisy" | "noisy-speech" | "noisyspeech" => Ok(SqaStrategy::NoisySpeech),
            other => Err(Error::Config(format!("unknown SQA strategy '{other}'"))),
        }
    }
}

/// `(mos1(x, x) + mos2(x, x)) / 2`, unclamped.
pub fn mos_replication_features(params: &ModelParams, x: &MelSpec) -> Result<f64> {
    let out = params.predict(&fuse(x, x)?)?;
    Ok(0.5 * (out.mos_pre[0] + out.mos_pre[1]))
}

/// `(mos1(x, n) + mos2(n, x)) / 2`: the clip's estimate from both positions.
pub fn mos_noisy_features(params: &ModelParams, x: &MelSpec, noisy: &MelSpec) -> Result<f64> {
    let first = params.predict(&fuse(x, noisy)?)?;
    let second = params.predict(&fuse(noisy, x)?)?;
    Ok(0.5 * (first.mos_pre[0] + second.mos_pre[1]))
}

fn extractor(params: &ModelParams) -> Result<LogMelExtractor> {
    let stft = StftConfig {
        n_mels: params.config().n_mels,
        ..StftConfig::default()
    };
    LogMelExtractor::new(stft, CANONICAL_RATE_HZ)
}

pub fn mos_replication(params: &ModelParams, clip: &AudioClip) -> Result<f64> {
    let x = extractor(params)?.extract(&clip.to_canonical()?)?;
    mos_replication_features(params, &x)
}

pub fn mos_noisy(params: &ModelParams, clip: &AudioClip, noisy: &AudioClip) -> Result<f64> {
    let ext = extractor(params)?;
    let x = ext.extract(&clip.to_canonical()?)?;
    let n = ext.extract(&noisy.to_canonical()?)?;
    mos_noisy_features(params, &x, &n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosEstimate {
    pub system_id: String,
    pub utterance_id: String,
    pub mos_estimate: f64,
}

/// Estimates every clip of `set`, system-major.
pub fn estimate_set(
    params: &ModelParams,
    set: &SystemSet,
    bank: &FeatureBank,
    strategy: SqaStrategy,
) -> Result<Vec<MosEstimate>> {
    if strategy == SqaStrategy::NoisySpeech && set.noisy().is_none() {
        return Err(Error::Data("noisy-speech strategy needs the noisy sources".into()));
    }
    let mut out = Vec::with_capacity(set.num_systems() * set.num_utterances());
    for (k, sys) in set.system_ids().iter().enumerate() {
        for (i, utt) in set.utterance_ids().iter().enumerate() {
            set.clip(k, i)?;
            let x = bank.require(sys, utt)?;
            let mos_estimate = match strategy {
                SqaStrategy::Replication => mos_replication_features(params, x)?,
                SqaStrategy::NoisySpeech => {
                    mos_noisy_features(params, x, bank.require(NOISY_SYSTEM_ID, utt)?)?
                }
            };
            out.push(MosEstimate {
                system_id: sys.clone(),
                utterance_id: utt.clone(),
                mos_estimate,
            });
        }
    }
    Ok(out)
}

/// Mean estimate per system, aligned with `system_ids`.
pub fn system_means(estimates: &[MosEstimate], system_ids: &[String]) -> Result<Vec<f64>> {
    system_ids
        .iter()
        .map(|id| {
            let vals: Vec<f64> = estimates
                .iter()
                .filter(|e| &e.system_id == id)
                .map(|e| e.mos_estimate)
                .collect();
            if vals.is_empty() {
                Err(Error::Data(format!("no estimates for system {id}")))
            } else {
                Ok(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        })
        .collect()
}

/// Writes `system_id,utterance_id,mos_estimate`.
pub fn write_estimates_csv(estimates: &[MosEstimate], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for e in estimates {
        w.serialize(e).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
