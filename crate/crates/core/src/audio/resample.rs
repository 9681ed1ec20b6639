use super::AudioClip;
use crate::error::{Error, Result};

/// Linear-interpolation resampling to `target_hz`.
///
/// Output length is `round(L * target / source)`; output sample `j` sits at
/// source position `j * source / target`.
pub fn resample(clip: &AudioClip, target_hz: u32) -> Result<AudioClip> {
    if target_hz < 1000 {
        return Err(Error::Config(format!(
            "target rate {target_hz} Hz is below the 1000 Hz minimum"
        )));
    }
    let source_hz = clip.sample_rate_hz();
    if source_hz == target_hz {
        return Ok(clip.clone());
    }

    let input = clip.samples();
    let ratio = f64::from(source_hz) / f64::from(target_hz);
    let out_len = ((input.len() as f64) / ratio).round().max(1.0) as usize;
    let last = input.len() - 1;
    let samples = (0..out_len)
        .map(|j| {
            let pos = j as f64 * ratio;
            let left = (pos.floor() as usize).min(last);
            let right = (left + 1).min(last);
            let frac = pos - left as f64;
            input[left] + (input[right] - input[left]) * frac.clamp(0.0, 1.0)
        })
        .collect();
    AudioClip::new(samples, target_hz)
}
