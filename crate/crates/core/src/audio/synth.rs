//! Synthetic system sets with a known latent quality order.
//!
//! Each utterance gets a speech-like clean signal (a voiced harmonic
//! complex under a syllabic envelope plus gated fricative noise) and one
//! noise realization. The noisy source is clean + noise at a low SNR; each
//! "system output" keeps the clean signal and rescales the same noise to
//! the system's grade SNR, optionally followed by a lowpass.
//! Surrogate MOS is a fixed monotone map of segmental SNR.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AudioClip, SystemSet, CANONICAL_RATE_HZ};
use crate::error::{Error, Result};
use crate::seed::SeedSplitter;

const SEG_SNR_FLOOR_DB: f64 = -10.0;
const SEG_SNR_CEIL_DB: f64 = 35.0;
const MOS_SNR_LO_DB: f64 = -5.0;
const MOS_SNR_HI_DB: f64 = 30.0;
const CLEAN_PEAK: f64 = 0.25;
const LOWPASS_TAPS: usize = 63;

/// Degradation applied by one synthetic system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grade {
    pub snr_db: f64,
    /// Lowpass cutoff as a fraction of Nyquist, in `(0, 1]`.
    #[serde(default)]
    pub lowpass: Option<f64>,
}

impl Grade {
    pub fn snr(snr_db: f64) -> Self {
        Self {
            snr_db,
            lowpass: None,
        }
    }

    /// `count` grades evenly spaced from 30 dB down to 0 dB.
    pub fn evenly_spaced(count: usize) -> Vec<Grade> {
        match count {
            0 => Vec::new(),
            1 => vec![Grade::snr(30.0)],
            n => (0..n)
                .map(|k| Grade::snr(30.0 - 30.0 * k as f64 / (n - 1) as f64))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub grades: Vec<Grade>,
    pub utterances: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    /// Range of SNRs for the unprocessed noisy sources.
    pub noisy_snr_db: (f64, f64),
    /// Standard deviation of Gaussian noise added to each surrogate MOS,
    /// emulating listener disagreement.
    pub rating_noise: f64,
}

impl SynthConfig {
    pub fn new(grades: Vec<Grade>, utterances: usize, seed: u64) -> Self {
        Self {
            grades,
            utterances,
            seed,
            duration_s: 1.0,
            sample_rate_hz: CANONICAL_RATE_HZ,
            noisy_snr_db: (-5.0, 0.0),
            rating_noise: 0.0,
        }
    }

    /// Generates the set; `k` must equal the number of grades.
    pub fn generate(&self, k: usize) -> Result<SystemSet> {
        if k != self.grades.len() {
            return Err(Error::Config(format!(
                "{k} systems requested but {} grades given",
                self.grades.len()
            )));
        }
        if k == 0 || self.utterances == 0 {
            return Err(Error::Config("need at least one system and one utterance".into()));
        }
        for g in &self.grades {
            if !g.snr_db.is_finite() {
                return Err(Error::Config("grade SNR must be finite".into()));
            }
            if let Some(f) = g.lowpass {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config(format!("lowpass fraction {f} not in (0, 1]")));
                }
            }
        }
        if !(self.duration_s > 0.0) || self.rating_noise < 0.0 {
            return Err(Error::Config("duration must be positive and rating noise non-negative".into()));
        }
        let len = (self.duration_s * f64::from(self.sample_rate_hz)).round() as usize;
        if len == 0 {
            return Err(Error::Config("duration too short for one sample".into()));
        }

        let seeds = SeedSplitter::new(self.seed).child("synth");
        let mut rating_rng = seeds.rng("rating");
        let rating = Normal::new(0.0, self.rating_noise.max(0.0))
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut jitter = |mos: f64| {
            if self.rating_noise > 0.0 {
                (mos + rating.sample(&mut rating_rng)).clamp(1.0, 5.0)
            } else {
                mos
            }
        };

        let fs = f64::from(self.sample_rate_hz);
        let mut clips = vec![Vec::with_capacity(self.utterances); k];
        let mut mos = vec![Vec::with_capacity(self.utterances); k];
        let mut noisy = Vec::with_capacity(self.utterances);
        let mut noisy_mos = Vec::with_capacity(self.utterances);

        for i in 0..self.utterances {
            let mut rng = seeds.rng(&format!("utt{i}"));
            let clean = clean_signal(&mut rng, len, fs);
            let noise: Vec<f64> = {
                let unit = Normal::new(0.0, 1.0).expect("unit normal");
                (0..len).map(|_| unit.sample(&mut rng)).collect()
            };
            let clean_power = power(&clean);
            let noise_power = power(&noise).max(f64::MIN_POSITIVE);
            let scaled_noise = |snr_db: f64| -> Vec<f64> {
                let gain = (clean_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt();
                noise.iter().map(|n| n * gain).collect()
            };

            let (lo, hi) = self.noisy_snr_db;
            let noisy_snr = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let noisy_wave: Vec<f64> = clean
                .iter()
                .zip(scaled_noise(noisy_snr))
                .map(|(c, n)| c + n)
                .collect();
            let noisy_clip = AudioClip::new(noisy_wave, self.sample_rate_hz)?;
            noisy_mos.push(jitter(surrogate_mos(segmental_snr_db(
                &clean,
                noisy_clip.samples(),
                self.sample_rate_hz,
            ))));
            noisy.push(noisy_clip);

            for (kk, grade) in self.grades.iter().enumerate() {
                let mut out: Vec<f64> = clean
                    .iter()
                    .zip(scaled_noise(grade.snr_db))
                    .map(|(c, n)| c + n)
                    .collect();
                if let Some(frac) = grade.lowpass {
                    out = lowpass(&out, frac);
                }
                let clip = AudioClip::new(out, self.sample_rate_hz)?;
                mos[kk].push(jitter(surrogate_mos(segmental_snr_db(
                    &clean,
                    clip.samples(),
                    self.sample_rate_hz,
                ))));
                clips[kk].push(clip);
            }
        }

        let width = k.to_string().len().max(2);
        let system_ids = (1..=k).map(|s| format!("sys{s:0width$}")).collect();
        let uwidth = self.utterances.to_string().len().max(4);
        let utterance_ids = (1..=self.utterances)
            .map(|u| format!("utt{u:0uwidth$}"))
            .collect();
        SystemSet::new(
            system_ids,
            utterance_ids,
            clips,
            Some(mos),
            Some(noisy),
            Some(noisy_mos),
        )
    }
}

/// Generates `k` systems over `m` utterances at the given grades with
/// default synthesis settings.
pub fn synth_system_set(k: usize, m: usize, seed: u64, grades: &[Grade]) -> Result<SystemSet> {
    SynthConfig::new(grades.to_vec(), m, seed).generate(k)
}

/// Mean per-frame SNR over 16 ms frames, each frame clamped to [-10, 35] dB.
pub fn segmental_snr_db(clean: &[f64], processed: &[f64], sample_rate_hz: u32) -> f64 {
    let frame = ((f64::from(sample_rate_hz) * 0.016).round() as usize).max(1);
    let n = clean.len().min(processed.len());
    let mut total = 0.0;
    let mut frames = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + frame).min(n);
        let (mut signal, mut error) = (0.0, 0.0);
        for t in start..end {
            signal += clean[t] * clean[t];
            let e = processed[t] - clean[t];
            error += e * e;
        }
        let snr = if error == 0.0 {
            SEG_SNR_CEIL_DB
        } else if signal == 0.0 {
            SEG_SNR_FLOOR_DB
        } else {
            10.0 * (signal / error).log10()
        };
        total += snr.clamp(SEG_SNR_FLOOR_DB, SEG_SNR_CEIL_DB);
        frames += 1;
        start = end;
    }
    if frames == 0 {
        SEG_SNR_FLOOR_DB
    } else {
        total / frames as f64
    }
}

/// Linear map of segmental SNR from [-5, 30] dB onto [1, 5], clamped.
pub fn surrogate_mos(seg_snr_db: f64) -> f64 {
    (1.0 + 4.0 * (seg_snr_db - MOS_SNR_LO_DB) / (MOS_SNR_HI_DB - MOS_SNR_LO_DB)).clamp(1.0, 5.0)
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

fn clean_signal<R: Rng>(rng: &mut R, len: usize, fs: f64) -> Vec<f64> {
    let f0 = rng.random_range(90.0..240.0);
    let vibrato_rate = rng.random_range(0.5..2.0);
    let vibrato_depth = rng.random_range(0.02..0.06);
    let formants = [rng.random_range(300.0..900.0), rng.random_range(900.0..2500.0)];
    let syllable_rate = rng.random_range(3.0..6.0);
    let syllable_phase = rng.random_range(0.0..2.0 * PI);
    let fric_rate = rng.random_range(1.0..2.5);
    let fric_phase = rng.random_range(0.0..2.0 * PI);
    let harmonics: Vec<(f64, f64)> = (1..=12)
        .map(|h| (rng.random_range(0.5..1.0) / h as f64, rng.random_range(0.0..2.0 * PI)))
        .collect();

    let mut phase = 0.0;
    let mut prev_white = 0.0;
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        let time = t as f64 / fs;
        let f = f0 * (1.0 + vibrato_depth * (2.0 * PI * vibrato_rate * time).sin());
        phase += 2.0 * PI * f / fs;

        let mut voiced = 0.0;
        for (h, &(amp, ph)) in harmonics.iter().enumerate() {
            let hf = f * (h + 1) as f64;
            if hf >= fs / 2.0 {
                break;
            }
            let emphasis: f64 = formants
                .iter()
                .map(|&fc| (-((hf - fc) / 250.0).powi(2)).exp())
                .sum::<f64>()
                + 0.2;
            voiced += amp * emphasis * (phase * (h + 1) as f64 + ph).sin();
        }
        let syllable = 0.5 * (1.0 - (2.0 * PI * syllable_rate * time + syllable_phase).cos());
        let envelope = 0.05 + 0.95 * syllable.powf(1.5);

        // first difference of white noise: crude highpass for fricatives
        let white: f64 = rng.random_range(-1.0..1.0);
        let fricative = white - prev_white;
        prev_white = white;
        let fric_gate = (2.0 * PI * fric_rate * time + fric_phase).sin().max(0.0).powi(4);

        out.push(envelope * voiced + 0.15 * fric_gate * fricative);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut out {
            *v *= CLEAN_PEAK / peak;
        }
    }
    out
}

/// Hamming-windowed sinc lowpass, zero-phase (centered) convolution.
fn lowpass(x: &[f64], cutoff_fraction: f64) -> Vec<f64> {
    if cutoff_fraction >= 1.0 {
        return x.to_vec();
    }
    let half = (LOWPASS_TAPS / 2) as isize;
    let fc = cutoff_fraction / 2.0; // cycles per sample
    let taps: Vec<f64> = (-half..=half)
        .map(|n| {
            let n_f = n as f64;
            let sinc = if n == 0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * n_f).sin() / (PI * n_f)
            };
            let window =
                0.54 + 0.46 * (PI * n_f / half as f64).cos();
            sinc * window
        })
        .collect();
    let gain: f64 = taps.iter().sum();
    (0..x.len() as isize)
        .map(|t| {
            taps.iter()
                .enumerate()
                .map(|(j, &h)| {
                    let idx = t + j as isize - half;
                    if idx >= 0 && (idx as usize) < x.len() {
                        h * x[idx as usize]
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
                / gain
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grades(snrs: &[f64]) -> Vec<Grade> {
        snrs.iter().copied().map(Grade::snr).collect()
    }

    #[test]
    fn better_grade_gets_higher_mos() {
        let set = synth_system_set(2, 6, 1, &grades(&[30.0, 0.0])).unwrap();
        let mean = set.mean_mos().unwrap();
        assert!(mean[0] > mean[1], "{mean:?}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let g = grades(&[20.0, 10.0]);
        let a = synth_system_set(2, 3, 42, &g).unwrap();
        let b = synth_system_set(2, 3, 42, &g).unwrap();
        assert_eq!(a, b);
        let c = synth_system_set(2, 3, 43, &g).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn three_grades_order_by_surrogate_mos() {
        let set = synth_system_set(3, 50, 9, &grades(&[30.0, 15.0, 0.0])).unwrap();
        let mean = set.mean_mos().unwrap();
        // expected order (1, 2, 3): sort system indices by descending mean MOS
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| mean[b].partial_cmp(&mean[a]).unwrap());
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn grade_count_must_match_k() {
        assert!(matches!(
            synth_system_set(3, 2, 0, &grades(&[10.0, 0.0])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lowpass_lowers_quality() {
        let g = vec![
            Grade::snr(30.0),
            Grade {
                snr_db: 30.0,
                lowpass: Some(0.2),
            },
        ];
        let set = synth_system_set(2, 4, 5, &g).unwrap();
        let mean = set.mean_mos().unwrap();
        assert!(mean[0] > mean[1], "{mean:?}");
    }

    #[test]
    fn surrogate_map_endpoints() {
        assert_eq!(surrogate_mos(-5.0), 1.0);
        assert_eq!(surrogate_mos(30.0), 5.0);
        assert_eq!(surrogate_mos(-50.0), 1.0);
        assert!((surrogate_mos(12.5) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn segmental_snr_of_identical_signals_hits_ceiling() {
        let x = vec![0.1; 1600];
        assert_eq!(segmental_snr_db(&x, &x, 16_000), 35.0);
    }

    #[test]
    fn noisy_source_and_labels_present() {
        let set = synth_system_set(2, 3, 0, &grades(&[20.0, 5.0])).unwrap();
        assert_eq!(set.noisy().unwrap().len(), 3);
        assert_eq!(set.noisy_mos().unwrap().len(), 3);
        assert_eq!(set.system_ids(), &["sys01".to_string(), "sys02".to_string()]);
    }
}
