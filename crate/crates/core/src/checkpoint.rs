//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "LANMTCKP"
//! version    u32
//! config     u64 length + UTF-8 JSON of ModelConfig
//! count      u64 number of parameters
//! per parameter:
//!   name     u64 length + UTF-8 bytes
//!   rank     u64
//!   dims     rank × u64
//!   values   product(dims) × f32 (IEEE-754)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"LANMTCKP";
pub const VERSION: u32 = 1;

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config())?;
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for p in model.params().iter() {
        out.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    Ok(out)
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let n = r.len()?;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)?;
    let mut model = Model::<T>::zeros(config)?;
    let count = r.len()?;
    if count != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameters, configuration expects {}",
            model.params().len()
        )));
    }
    for _ in 0..count {
        let n = r.len()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.len()?;
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let size: usize = dims.iter().product();
        let raw = r.take(size.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let values: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        let slot = model
            .param_mut(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name:?}")))?;
        if slot.shape() != dims.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?} has shape {dims:?}, expected {:?}",
                slot.shape()
            )));
        }
        *slot = Tensor::new(dims, values)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last parameter",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionMode;

    fn cfg() -> ModelConfig {
        ModelConfig {
            source_vocab_size: 8,
            target_vocab_size: 6,
            embedding_dim: 3,
            hidden_dim: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            attention_mode: AttentionMode::EncDec,
            dropout_rate: 0.2,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = Model::<f32>::new(cfg(), 9).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let back: Model<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params(), m.params());
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let m = Model::<f32>::zeros(cfg()).unwrap();
        let bytes = to_bytes(&m).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let cfg_json: ModelConfig = serde_json::from_slice(&bytes[20..20 + n]).unwrap();
        assert_eq!(&cfg_json, m.config());
    }

    #[test]
    fn rejects_bad_version_and_truncation() {
        let m = Model::<f32>::zeros(cfg()).unwrap();
        let mut bytes = to_bytes(&m).unwrap();
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 3]).is_err());
        bytes[8] = 99;
        let err = from_bytes::<f32>(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        assert!(from_bytes::<f32>(b"garbage!").is_err());
    }
}
