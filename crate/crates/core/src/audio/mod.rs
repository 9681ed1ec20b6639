//! Waveform containers, WAV I/O, resampling, and synthetic system sets.

mod resample;
mod set;
mod synth;
mod wav;

pub use resample::resample;
pub use set::{ClipRef, SystemSet, NOISY_SYSTEM_ID};
pub use synth::{segmental_snr_db, surrogate_mos, synth_system_set, Grade, SynthConfig};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav};

use crate::error::{Error, Result};

/// Sample rate every clip is brought to on ingestion.
pub const CANONICAL_RATE_HZ: u32 = 16_000;

/// Mono waveform with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioClip {
    /// Builds a clip, rejecting empty or non-finite input. Samples outside
    /// `[-1, 1]` are clipped.
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("audio clip must contain at least one sample".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        if let Some(pos) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {pos}")));
        }
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }

    /// Resamples to [`CANONICAL_RATE_HZ`] if needed.
    pub fn to_canonical(&self) -> Result<AudioClip> {
        resample(self, CANONICAL_RATE_HZ)
    }
}
