//! Binary checkpoint format.
//!
//! ```text
//! "SRPK"  u32 version
//! u32 n   config block: n bytes of `key=value` lines
//! u32 count, then per tensor:
//!   u32 n  name (n bytes UTF-8)
//!   u32 rank, rank × u32 dims
//!   Π dims × f32 payload
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use thiserror::Error;

use crate::model::{CausalLM, ModelConfig, ModelError};

pub const MAGIC: &[u8; 4] = b"SRPK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes at offset 0")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated at offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("{extra} unexpected trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("malformed checkpoint at offset {offset}: {msg}")]
    Malformed { offset: usize, msg: String },
    #[error("checkpoint does not match its config: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CheckpointError {
    /// Whether the file itself is damaged or foreign, as opposed to an I/O failure.
    pub fn is_integrity(&self) -> bool {
        !matches!(self, CheckpointError::Io(_))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn to_bytes(model: &CausalLM) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.num_params() * 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let kv = model.config().to_kv();
    put_u32(&mut out, kv.len() as u32);
    out.extend_from_slice(kv.as_bytes());
    let specs = model.layout().specs();
    put_u32(&mut out, specs.len() as u32);
    for spec in specs {
        put_u32(&mut out, spec.name.len() as u32);
        out.extend_from_slice(spec.name.as_bytes());
        put_u32(&mut out, spec.shape.len() as u32);
        for &d in &spec.shape {
            put_u32(&mut out, d as u32);
        }
        for &p in &model.params()[spec.range.clone()] {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(CheckpointError::Truncated { offset: self.pos, needed: n - left });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str, CheckpointError> {
        let at = self.pos;
        std::str::from_utf8(self.take(n)?).map_err(|e| CheckpointError::Malformed { offset: at, msg: e.to_string() })
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<CausalLM, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < 4 {
        return Err(CheckpointError::Truncated { offset: 0, needed: 4 - buf.len() });
    }
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let kv_len = r.u32()? as usize;
    let kv_at = r.pos;
    let config = ModelConfig::from_kv(r.utf8(kv_len)?)
        .map_err(|e| CheckpointError::Malformed { offset: kv_at, msg: e.to_string() })?;
    let total = crate::model::Layout::new(&config).total();
    // Refuse before allocating when the payload cannot possibly be present.
    if total.saturating_mul(4) > buf.len() - r.pos {
        return Err(CheckpointError::Truncated { offset: r.pos, needed: total.saturating_mul(4) - (buf.len() - r.pos) });
    }
    let mut model = CausalLM::from_params(config, vec![0.0; total])?;
    let expected = model.layout().specs().to_vec();
    let count_at = r.pos;
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{count} tensors at offset {count_at}, config implies {}",
            expected.len()
        )));
    }
    for spec in &expected {
        let name_len = r.u32()? as usize;
        let name_at = r.pos;
        let name = r.utf8(name_len)?;
        if name != spec.name {
            return Err(CheckpointError::Mismatch(format!("tensor `{name}` at offset {name_at}, expected `{}`", spec.name)));
        }
        let rank = r.u32()? as usize;
        let dims_at = r.pos;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if dims != spec.shape {
            return Err(CheckpointError::Mismatch(format!(
                "tensor `{name}` has shape {dims:?} at offset {dims_at}, expected {:?}",
                spec.shape
            )));
        }
        let payload = r.take(spec.range.len() * 4)?;
        for (p, b) in model.params_mut()[spec.range.clone()].iter_mut().zip(payload.chunks_exact(4)) {
            *p = f32::from_le_bytes(b.try_into().expect("four bytes")) as f64;
        }
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::TrailingBytes { offset: r.pos, extra: buf.len() - r.pos });
    }
    if !model.all_finite() {
        return Err(CheckpointError::Malformed { offset: 0, msg: "non-finite parameter".into() });
    }
    Ok(model)
}

pub fn save_checkpoint(model: &CausalLM, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CausalLM, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CausalLM {
        let cfg = ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, d_ff: 16, vocab_size: 10, max_len: 12 };
        CausalLM::new(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = model();
        let back = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back, m);
        let probe = [1, 4, 5, 6, 2];
        assert_eq!(back.forward_logits(&probe).unwrap(), m.forward_logits(&probe).unwrap());
    }

    #[test]
    fn truncation_is_detected_everywhere() {
        let bytes = to_bytes(&model());
        for cut in [0, 3, 7, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CheckpointError::Truncated { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn foreign_and_future_files_are_rejected() {
        let mut bytes = to_bytes(&model());
        bytes.push(0);
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::TrailingBytes { extra: 1, .. })));
        bytes.pop();
        let mut bumped = bytes.clone();
        bumped[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(from_bytes(&bumped), Err(CheckpointError::UnsupportedVersion { found: 2 })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(from_bytes(&magic), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn config_and_shape_mismatches_are_rejected() {
        let bytes = to_bytes(&model());
        let text = String::from_utf8_lossy(&bytes).into_owned();
        // Same-length edit of the config block: vocab 10 → 11 changes tok_emb's shape.
        let at = text.find("vocab_size=10").unwrap() + "vocab_size=".len();
        let mut edited = bytes.clone();
        edited[at + 1] = b'1';
        assert!(matches!(from_bytes(&edited), Err(CheckpointError::Mismatch(_))));
    }
}
