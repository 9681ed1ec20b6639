//! Log-mel front end: Hann-windowed STFT power, triangular mel filterbank,
//! natural-log compression with a floor.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, SystemSet, CANONICAL_RATE_HZ, NOISY_SYSTEM_ID};
use crate::error::{Error, Result};

pub const DEFAULT_N_MELS: usize = 120;

const CACHE_MAGIC: &[u8; 4] = b"PKMF";
const CACHE_DTYPE_F32: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub win: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub floor_eps: f64,
    pub n_mels: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            win: 512,
            hop: 256,
            n_fft: 512,
            floor_eps: 1e-10,
            n_mels: DEFAULT_N_MELS,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.win || self.win > self.n_fft {
            return Err(Error::Config(format!(
                "need 0 < hop <= win <= n_fft, got hop={} win={} n_fft={}",
                self.hop, self.win, self.n_fft
            )));
        }
        if !(self.floor_eps > 0.0) {
            return Err(Error::Config("floor_eps must be positive".into()));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        Ok(())
    }

    /// `1 + floor((L - win) / hop)` for `L >= win`.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        (len >= self.win).then(|| 1 + (len - self.win) / self.hop)
    }

    pub fn num_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

/// Row-major `rows x cols` matrix of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// `T x N` log-mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    pub data: Matrix,
    pub frame_hop_s: f64,
    pub floor_eps: f64,
}

impl MelSpec {
    pub fn n_frames(&self) -> usize {
        self.data.rows
    }

    pub fn n_mels(&self) -> usize {
        self.data.cols
    }

    /// Value of a silent frame, used when padding along time.
    pub fn floor_value(&self) -> f64 {
        self.floor_eps.ln()
    }
}

fn hann(win: usize) -> Vec<f64> {
    // periodic Hann
    (0..win)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
        .collect()
}

/// Squared-magnitude one-sided spectrum of Hann-windowed frames.
pub fn stft_power(clip: &AudioClip, cfg: &StftConfig) -> Result<Matrix> {
    cfg.validate()?;
    let samples = clip.samples();
    let frames = cfg.num_frames(samples.len()).ok_or_else(|| {
        Error::TooShort(format!(
            "clip has {} samples, window needs {}",
            samples.len(),
            cfg.win
        ))
    })?;
    let window = hann(cfg.win);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(cfg.n_fft);
    let bins = cfg.num_bins();
    let mut out = Matrix::zeros(frames, bins);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (j, slot) in buf.iter_mut().enumerate() {
            *slot = if j < cfg.win {
                Complex::new(samples[start + j] * window[j], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        let row = &mut out.data[t * bins..(t + 1) * bins];
        for (dst, c) in row.iter_mut().zip(&buf) {
            *dst = c.norm_sqr();
        }
    }
    Ok(out)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of `n_mels` filters spaced uniformly on the mel
/// scale between 0 Hz and `fs / 2`.
pub fn mel_centers_hz(n_mels: usize, fs_hz: f64) -> Vec<f64> {
    mel_edges_hz(n_mels, fs_hz)[1..=n_mels].to_vec()
}

fn mel_edges_hz(n_mels: usize, fs_hz: f64) -> Vec<f64> {
    let top = hz_to_mel(fs_hz / 2.0);
    (0..n_mels + 2)
        .map(|j| mel_to_hz(top * j as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Integral over `[a, b]` of the triangle rising from `lo` to a peak of 1
/// at `center` and falling back to 0 at `hi`.
fn triangle_integral(lo: f64, center: f64, hi: f64, a: f64, b: f64) -> f64 {
    // integral of a linear ramp (0 at x0, 1 at x1) over [a, b] clipped to its support
    fn ramp(x0: f64, x1: f64, a: f64, b: f64) -> f64 {
        let (left, right) = if x0 < x1 { (x0, x1) } else { (x1, x0) };
        let (s, e) = (a.max(left), b.min(right));
        if e <= s {
            return 0.0;
        }
        let value = |x: f64| (x - x0) / (x1 - x0);
        0.5 * (value(s) + value(e)) * (e - s)
    }
    ramp(lo, center, a, b) + ramp(hi, center, a, b)
}

/// `(n_fft/2 + 1) x n_mels` triangular filterbank.
///
/// Each bin's weight is the triangle's integral over the bin's frequency
/// cell `[f - df/2, f + df/2]`, and each filter is then scaled so its
/// weights sum to one. Integrating rather than point-sampling keeps filters
/// narrower than a bin non-empty, which matters for 120 filters on a
/// 512-point FFT.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, fs_hz: f64) -> Result<Matrix> {
    if n_mels == 0 {
        return Err(Error::Config("n_mels must be at least 1".into()));
    }
    if n_fft < 2 || !(fs_hz > 0.0) {
        return Err(Error::Config("n_fft must be >= 2 and fs positive".into()));
    }
    let bins = n_fft / 2 + 1;
    let df = fs_hz / n_fft as f64;
    let edges = mel_edges_hz(n_mels, fs_hz);
    let mut fb = Matrix::zeros(bins, n_mels);
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut total = 0.0;
        for b in 0..bins {
            let f = b as f64 * df;
            let w = triangle_integral(lo, center, hi, f - df / 2.0, f + df / 2.0);
            fb.data[b * n_mels + m] = w;
            total += w;
        }
        if total <= 0.0 {
            return Err(Error::Numeric(format!("mel filter {m} covers no bins")));
        }
        for b in 0..bins {
            fb.data[b * n_mels + m] /= total;
        }
    }
    Ok(fb)
}

/// Computes log-mel features, reusing the filterbank across calls.
#[derive(Debug, Clone)]
pub struct LogMelExtractor {
    cfg: StftConfig,
    fs_hz: u32,
    filterbank: Matrix,
}

impl LogMelExtractor {
    pub fn new(cfg: StftConfig, fs_hz: u32) -> Result<Self> {
        cfg.validate()?;
        let filterbank = mel_filterbank(cfg.n_mels, cfg.n_fft, f64::from(fs_hz))?;
        Ok(Self {
            cfg,
            fs_hz,
            filterbank,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<MelSpec> {
        if clip.sample_rate_hz() != self.fs_hz {
            return Err(Error::Config(format!(
                "extractor built for {} Hz, clip is {} Hz",
                self.fs_hz,
                clip.sample_rate_hz()
            )));
        }
        let power = stft_power(clip, &self.cfg)?;
        let n_mels = self.cfg.n_mels;
        let mut data = Matrix::zeros(power.rows, n_mels);
        for t in 0..power.rows {
            let prow = power.row(t);
            let out = &mut data.data[t * n_mels..(t + 1) * n_mels];
            for (b, &p) in prow.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let frow = &self.filterbank.data[b * n_mels..(b + 1) * n_mels];
                for (o, &w) in out.iter_mut().zip(frow) {
                    *o += p * w;
                }
            }
            for o in out.iter_mut() {
                *o = (*o + self.cfg.floor_eps).ln();
            }
        }
        Ok(MelSpec {
            data,
            frame_hop_s: self.cfg.hop as f64 / f64::from(self.fs_hz),
            floor_eps: self.cfg.floor_eps,
        })
    }
}

/// `ln(power . filterbank + floor_eps)` at the clip's own sample rate.
pub fn log_mel(clip: &AudioClip, cfg: &StftConfig) -> Result<MelSpec> {
    LogMelExtractor::new(*cfg, clip.sample_rate_hz())?.extract(clip)
}

/// Writes a feature-cache file: 16-byte header (`PKMF`, T, N, dtype code)
/// followed by row-major little-endian f32 values.
pub fn write_feature_cache(spec: &MelSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(16 + spec.data.data.len() * 4);
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&(spec.n_frames() as u32).to_le_bytes());
    bytes.extend_from_slice(&(spec.n_mels() as u32).to_le_bytes());
    bytes.extend_from_slice(&CACHE_DTYPE_F32.to_le_bytes());
    for &v in &spec.data.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a feature-cache file. Frame hop and floor are not stored and must
/// be supplied from the extraction config.
pub fn read_feature_cache(path: impl AsRef<Path>, cfg: &StftConfig, fs_hz: u32) -> Result<MelSpec> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[0..4] != CACHE_MAGIC {
        return Err(bad("not a feature-cache file"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let (rows, cols, dtype) = (word(4) as usize, word(8) as usize, word(12));
    if dtype != CACHE_DTYPE_F32 {
        return Err(bad(&format!("unknown dtype code {dtype}")));
    }
    if bytes.len() != 16 + rows * cols * 4 {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Ok(MelSpec {
        data: Matrix { rows, cols, data },
        frame_hop_s: cfg.hop as f64 / f64::from(fs_hz),
        floor_eps: cfg.floor_eps,
    })
}

type BankKey = (String, String);

/// Log-mel features of every clip in a system set, keyed by
/// `(system_id, utterance_id)`. Noisy sources live under the noisy system id.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    cfg: StftConfig,
    map: HashMap<BankKey, Arc<MelSpec>>,
}

impl FeatureBank {
    pub fn new(cfg: StftConfig) -> Self {
        Self {
            cfg,
            map: HashMap::new(),
        }
    }

    /// Extracts every clip of `set` (and its noisy sources, if any) at the
    /// canonical rate.
    pub fn extract_set(set: &SystemSet, cfg: StftConfig) -> Result<Self> {
        Self::extract_set_cached(set, cfg, None)
    }

    /// Like [`FeatureBank::extract_set`], reusing feature-cache files under
    /// `<cache>/<system_id>/<utterance_id>.pkmf` and writing missing ones.
    /// Cached values are stored as f32, so freshly extracted features are
    /// rounded the same way to keep cold and warm runs identical.
    pub fn extract_set_cached(set: &SystemSet, cfg: StftConfig, cache: Option<&Path>) -> Result<Self> {
        let extractor = LogMelExtractor::new(cfg, CANONICAL_RATE_HZ)?;
        let mut bank = Self::new(cfg);
        let mut jobs: Vec<(&str, &str, &AudioClip)> = Vec::new();
        for k in 0..set.num_systems() {
            for i in 0..set.num_utterances() {
                let item = set.item(k, i)?;
                jobs.push((item.system_id, item.utterance_id, item.clip));
            }
        }
        if let (Some(noisy), false) = (set.noisy(), set.noisy_included()) {
            for (i, clip) in noisy.iter().enumerate() {
                jobs.push((NOISY_SYSTEM_ID, &set.utterance_ids()[i], clip));
            }
        }
        for (sys, utt, clip) in jobs {
            let spec = match cache {
                None => extractor.extract(&clip.to_canonical()?)?,
                Some(dir) => {
                    let path = dir.join(sys).join(format!("{utt}.pkmf"));
                    if path.exists() {
                        read_feature_cache(&path, &cfg, CANONICAL_RATE_HZ)?
                    } else {
                        let mut spec = extractor.extract(&clip.to_canonical()?)?;
                        spec.data.data.iter_mut().for_each(|v| *v = f64::from(*v as f32));
                        let parent = path.parent().expect("cache path has a parent");
                        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                        write_feature_cache(&spec, &path)?;
                        spec
                    }
                }
            };
            if spec.n_mels() != cfg.n_mels {
                return Err(Error::Shape(format!(
                    "cached features for ({sys}, {utt}) have {} bands, expected {}",
                    spec.n_mels(),
                    cfg.n_mels
                )));
            }
            bank.insert(sys, utt, spec);
        }
        Ok(bank)
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn insert(&mut self, system_id: &str, utterance_id: &str, spec: MelSpec) {
        self.map
            .insert((system_id.to_string(), utterance_id.to_string()), Arc::new(spec));
    }

    pub fn get(&self, system_id: &str, utterance_id: &str) -> Option<&Arc<MelSpec>> {
        self.map.get(&(system_id.to_string(), utterance_id.to_string()))
    }

    pub fn require(&self, system_id: &str, utterance_id: &str) -> Result<&Arc<MelSpec>> {
        self.get(system_id, utterance_id).ok_or_else(|| {
            Error::Data(format!("no features for ({system_id}, {utterance_id})"))
        })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tone(freq: f64, len: usize) -> AudioClip {
        let samples = (0..len)
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * freq * n as f64 / 16_000.0).sin())
            .collect();
        AudioClip::new(samples, 16_000).unwrap()
    }

    #[test]
    fn silence_has_zero_power() {
        let clip = AudioClip::new(vec![0.0; 2048], 16_000).unwrap();
        let p = stft_power(&clip, &StftConfig::default()).unwrap();
        assert!(p.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_clip() {
        let clip = AudioClip::new(vec![0.0; 100], 16_000).unwrap();
        assert!(matches!(
            stft_power(&clip, &StftConfig::default()),
            Err(Error::TooShort(_))
        ));
    }

    #[test]
    fn parseval_per_frame() {
        // one-sided spectrum energy, mirrored, equals n_fft * sum (x w)^2
        let cfg = StftConfig::default();
        let mut samples = vec![0.0; 1024];
        samples[100] = 1.0;
        samples[300] = -0.5;
        for (n, s) in samples.iter_mut().enumerate().skip(600) {
            *s = 0.3 * ((n * 7919) % 13) as f64 / 13.0 - 0.15;
        }
        let clip = AudioClip::new(samples.clone(), 16_000).unwrap();
        let p = stft_power(&clip, &cfg).unwrap();
        let w = hann(cfg.win);
        for t in 0..p.rows {
            let time_energy: f64 = (0..cfg.win)
                .map(|j| (samples[t * cfg.hop + j] * w[j]).powi(2))
                .sum();
            let row = p.row(t);
            let half = cfg.n_fft / 2;
            let spec_energy =
                row[0] + row[half] + 2.0 * row[1..half].iter().sum::<f64>();
            assert_relative_eq!(spec_energy, cfg.n_fft as f64 * time_energy, max_relative = 1e-10);
        }
    }

    #[test]
    fn tone_peaks_at_expected_bin() {
        // bin = f * n_fft / fs = 1000 * 512 / 16000 = 32
        let p = stft_power(&tone(1000.0, 4096), &StftConfig::default()).unwrap();
        for t in 0..p.rows {
            let row = p.row(t);
            let argmax = (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            assert_eq!(argmax, 32);
        }
    }

    #[test]
    fn mel_scale_closed_form() {
        assert_relative_eq!(hz_to_mel(700.0), 2595.0 * 2f64.log10(), epsilon = 1e-12);
        assert_relative_eq!(hz_to_mel(700.0), 781.17, epsilon = 0.01);
        assert_relative_eq!(mel_to_hz(hz_to_mel(1234.5)), 1234.5, epsilon = 1e-9);
    }

    #[test]
    fn filterbank_shape_and_coverage() {
        let fb = mel_filterbank(120, 512, 16_000.0).unwrap();
        assert_eq!((fb.rows, fb.cols), (257, 120));
        assert!(fb.data.iter().all(|&w| w >= 0.0));
        for m in 0..120 {
            let sum: f64 = (0..257).map(|b| fb.at(b, m)).sum();
            assert!(sum > 0.0);
        }
        for b in 1..256 {
            assert!((0..120).any(|m| fb.at(b, m) > 0.0), "bin {b} uncovered");
        }
        let centers = mel_centers_hz(120, 16_000.0);
        assert!(centers.windows(2).all(|w| w[0] < w[1]));
        assert!(centers[0] > 0.0 && centers[119] < 8000.0);
    }

    #[test]
    fn silence_maps_to_floor() {
        let cfg = StftConfig::default();
        let clip = AudioClip::new(vec![0.0; 4000], 16_000).unwrap();
        let spec = log_mel(&clip, &cfg).unwrap();
        assert!(spec.data.data.iter().all(|&v| v == cfg.floor_eps.ln()));
    }

    #[test]
    fn one_second_frame_count() {
        let cfg = StftConfig::default();
        let clip = tone(440.0, 16_000);
        let spec = log_mel(&clip, &cfg).unwrap();
        assert_eq!(spec.n_frames(), 61);
        assert_eq!(spec.n_mels(), 120);
        assert_eq!(cfg.num_frames(16_000), Some(61));
    }

    #[test]
    fn doubling_amplitude_shifts_by_log4() {
        let cfg = StftConfig::default();
        let base: Vec<f64> = (0..8000)
            .map(|n| 0.2 * ((n as f64 * 0.37).sin() + (n as f64 * 0.011).cos()))
            .collect();
        let twice: Vec<f64> = base.iter().map(|v| 2.0 * v).collect();
        let a = log_mel(&AudioClip::new(base, 16_000).unwrap(), &cfg).unwrap();
        let b = log_mel(&AudioClip::new(twice, 16_000).unwrap(), &cfg).unwrap();
        let log4 = 4f64.ln();
        for (x, y) in a.data.data.iter().zip(&b.data.data) {
            let shift = y - x;
            assert!(shift <= log4 + 1e-9 && shift >= -1e-9);
            if x.exp() > 1e6 * cfg.floor_eps {
                assert_relative_eq!(shift, log4, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn feature_cache_round_trip() {
        let cfg = StftConfig::default();
        let spec = log_mel(&tone(500.0, 3000), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pkmf");
        write_feature_cache(&spec, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"PKMF");
        assert_eq!(bytes.len(), 16 + spec.data.data.len() * 4);
        let back = read_feature_cache(&path, &cfg, 16_000).unwrap();
        assert_eq!((back.n_frames(), back.n_mels()), (spec.n_frames(), spec.n_mels()));
        for (a, b) in spec.data.data.iter().zip(&back.data.data) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn frame_count_law(len in 512usize..6000) {
            let cfg = StftConfig::default();
            let clip = AudioClip::new(vec![0.01; len], 16_000).unwrap();
            let spec = log_mel(&clip, &cfg).unwrap();
            prop_assert_eq!(spec.n_frames(), 1 + (len - 512) / 256);
        }

        #[test]
        fn larger_power_never_lowers_log_mel(scale in 1.0f64..3.0, seed in 0u64..1000) {
            let cfg = StftConfig::default();
            let base: Vec<f64> = (0..1500)
                .map(|n| 0.3 * (((n as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0 - 0.5))
                .collect();
            let louder: Vec<f64> = base.iter().map(|v| v * scale).collect();
            let a = log_mel(&AudioClip::new(base, 16_000).unwrap(), &cfg).unwrap();
            let b = log_mel(&AudioClip::new(louder, 16_000).unwrap(), &cfg).unwrap();
            for (x, y) in a.data.data.iter().zip(&b.data.data) {
                prop_assert!(y >= x);
            }
        }
    }
}
