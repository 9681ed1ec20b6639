//! Binary checkpoint files.
//!
//! Little-endian throughout: magic `PKCK`, `u32` version, the model config
//! (four `u32` block counts, `u32` base channels, `u32` mel bands, `u8`
//! desk flag), `u32` tensor count, then per tensor a `u32` name length,
//! the UTF-8 name, `u32` rank, `u32` dims and row-major `f32` values.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::network::ModelParams;
use super::ModelConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PKCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let cfg = params.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for &b in &cfg.block_counts {
        out.extend_from_slice(&(b as u32).to_le_bytes());
    }
    out.extend_from_slice(&(cfg.base_channels as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.n_mels as u32).to_le_bytes());
    out.push(u8::from(cfg.desk_profile));
    let tensors = params.layout().tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let src = if t.running { params.running() } else { params.weights() };
        for &v in &src[t.range()] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut block_counts = [0; 4];
    for b in &mut block_counts {
        *b = r.usize()?;
    }
    let config = ModelConfig {
        block_counts,
        base_channels: r.usize()?,
        n_mels: r.usize()?,
        desk_profile: r.take(1)?[0] != 0,
    };
    let layout = ModelParams::layout_for(&config)
        .map_err(|e| Error::Checkpoint(format!("invalid model config: {e}")))?;
    let expected: HashMap<&str, _> = layout.tensors().iter().map(|t| (t.name.as_str(), t)).collect();

    let n_weights: usize = layout.tensors().iter().filter(|t| !t.running).map(|t| t.len()).sum();
    let n_running: usize = layout.tensors().iter().filter(|t| t.running).map(|t| t.len()).sum();
    let mut weights = vec![0.0; n_weights];
    let mut running = vec![0.0; n_running];
    let mut seen = std::collections::HashSet::new();

    let count = r.usize()?;
    for _ in 0..count {
        let len = r.usize()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let info = expected
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor '{name}'")))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("tensor '{name}' appears twice")));
        }
        let rank = r.usize()?;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if shape != info.shape {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {shape:?}, expected {:?}",
                info.shape
            )));
        }
        let dst = if info.running { &mut running[info.range()] } else { &mut weights[info.range()] };
        let raw = r.take(4 * dst.len())?;
        for (v, b) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            let x = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            if !x.is_finite() {
                return Err(Error::Checkpoint(format!("tensor '{name}' holds a non-finite value")));
            }
            *v = f64::from(x);
        }
    }
    if seen.len() != expected.len() {
        let missing: Vec<&str> = expected.keys().filter(|k| !seen.contains(**k)).copied().collect();
        return Err(Error::Checkpoint(format!("missing tensors: {}", missing.join(", "))));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    ModelParams::from_parts(config, weights, running)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        ModelParams::new(ModelConfig::desk().with_n_mels(24), 11).unwrap()
    }

    #[test]
    fn round_trip_is_f32_exact() {
        let p = params();
        let q = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
        assert_eq!(q.config(), p.config());
        for (a, b) in p.weights().iter().zip(q.weights()) {
            assert_eq!(*a as f32 as f64, *b);
        }
        // a second trip is lossless
        assert_eq!(encode_checkpoint(&q), encode_checkpoint(&p));
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&params());
        assert_eq!(&bytes[..4], b"PKCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()), 24);
        assert_eq!(bytes[32], 1);
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode_checkpoint(&params());
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Checkpoint(_))));
    }
}
