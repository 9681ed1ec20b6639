//! RIFF/WAVE reading and writing, restricted to mono 16-bit PCM.

use std::fs;
use std::path::Path;

use super::AudioClip;
use crate::error::{Error, Result};

const PCM_FORMAT_TAG: u16 = 1;

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        Error::UnsupportedFormat(msg) => {
            Error::UnsupportedFormat(format!("{}: {msg}", path.display()))
        }
        other => other,
    })
}

pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(clip)).map_err(|e| Error::io(path, e))
}

fn u16_at(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("missing RIFF/WAVE header".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "chunk {:?} overruns file",
                    String::from_utf8_lossy(id)
                ))
            })?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Format("fmt chunk shorter than 16 bytes".into()));
                }
                fmt = Some((
                    u16_at(body, 0),
                    u16_at(body, 2),
                    u32_at(body, 4),
                    u16_at(body, 14),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }

    let (format_tag, channels, sample_rate, bits) =
        fmt.ok_or_else(|| Error::Format("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Format("no data chunk".into()))?;

    if format_tag != PCM_FORMAT_TAG {
        return Err(Error::UnsupportedFormat(format!(
            "format tag {format_tag}, only PCM (1) is supported"
        )));
    }
    if channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{channels} channels, only mono is supported"
        )));
    }
    if bits != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{bits}-bit samples, only 16-bit is supported"
        )));
    }
    if sample_rate == 0 {
        return Err(Error::Format("zero sample rate".into()));
    }
    if data.len() % 2 != 0 {
        return Err(Error::Format("data chunk is not a whole number of frames".into()));
    }

    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|b| f64::from(i16::from_le_bytes([b[0], b[1]])) / 32768.0)
        .collect();
    if samples.is_empty() {
        return Err(Error::Format("data chunk holds no frames".into()));
    }
    AudioClip::new(samples, sample_rate)
}

pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT_TAG.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate_hz().to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate_hz() * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in clip.samples() {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn wav_with_frames(frames: &[i16], rate: u32) -> Vec<u8> {
        let samples: Vec<f64> = frames.iter().map(|&f| f64::from(f) / 32768.0).collect();
        encode_wav(&AudioClip::new(samples, rate).unwrap())
    }

    #[test]
    fn zero_frame_reads_as_zero() {
        let clip = decode_wav(&wav_with_frames(&[0], 16_000)).unwrap();
        assert_eq!(clip.samples(), &[0.0]);
    }

    #[test]
    fn most_negative_frame_reads_as_minus_one() {
        let mut bytes = wav_with_frames(&[0], 16_000);
        let n = bytes.len();
        bytes[n - 2..].copy_from_slice(&0x8000u16.to_le_bytes());
        let clip = decode_wav(&bytes).unwrap();
        assert_eq!(clip.samples(), &[-1.0]);
    }

    #[test]
    fn one_second_at_16k() {
        let clip = decode_wav(&wav_with_frames(&vec![100; 16_000], 16_000)).unwrap();
        assert_eq!(clip.len(), 16_000);
        assert_eq!(clip.duration_s(), 1.0);
        assert_eq!(clip.sample_rate_hz(), 16_000);
    }

    #[test]
    fn round_trip_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let clip = AudioClip::new(vec![0.0, 0.5, -0.5], 16_000).unwrap();
        write_wav(&clip, &path).unwrap();
        let back = read_wav(&path).unwrap();
        for (a, b) in clip.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }

        let zeros = AudioClip::new(vec![0.0; 64], 8_000).unwrap();
        write_wav(&zeros, &path).unwrap();
        assert_eq!(read_wav(&path).unwrap(), zeros);
    }

    #[test]
    fn white_noise_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<f64> = (0..16_000).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let clip = AudioClip::new(samples, 16_000).unwrap();
        let back = decode_wav(&encode_wav(&clip)).unwrap();
        let max_err = clip
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1.0 / 32768.0, "max error {max_err}");
    }

    #[test]
    fn rejects_stereo_and_other_depths() {
        let mut bytes = wav_with_frames(&[0, 0], 16_000);
        bytes[22..24].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(decode_wav(&bytes), Err(Error::UnsupportedFormat(_))));

        let mut bytes = wav_with_frames(&[0, 0], 16_000);
        bytes[34..36].copy_from_slice(&24u16.to_le_bytes());
        assert!(matches!(decode_wav(&bytes), Err(Error::UnsupportedFormat(_))));

        let mut bytes = wav_with_frames(&[0, 0], 16_000);
        bytes[20..22].copy_from_slice(&3u16.to_le_bytes());
        assert!(matches!(decode_wav(&bytes), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn rejects_malformed_headers() {
        assert!(matches!(decode_wav(b"RIFX"), Err(Error::Format(_))));
        let mut bytes = wav_with_frames(&[0, 0], 16_000);
        bytes[40..44].copy_from_slice(&1000u32.to_le_bytes());
        assert!(matches!(decode_wav(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn skips_unknown_chunks() {
        let plain = wav_with_frames(&[1, 2, 3], 16_000);
        let mut bytes = plain[..12].to_vec();
        bytes.extend_from_slice(b"LIST");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(b"abc\0");
        bytes.extend_from_slice(&plain[12..]);
        assert_eq!(decode_wav(&bytes).unwrap(), decode_wav(&plain).unwrap());
    }
}
