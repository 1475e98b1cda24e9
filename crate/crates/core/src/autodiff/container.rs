//! The `KUNT` named-tensor container (version 1).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "KUNT"
//! version u32      1
//! count   u32      number of entries
//! entry*  name_len u16, name bytes (ASCII), rank u8, dims u32 each,
//!         payload f32 little-endian, row-major
//! ```
//!
//! Entries are written in ascending name order, so serialization is
//! deterministic. Values round-trip exactly at 32-bit precision.

use super::tensor::Tensor;
use std::collections::BTreeMap;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"KUNT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("truncated file while reading {0}")]
    Truncated(&'static str),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("invalid tensor name {0:?} (must be non-empty ASCII)")]
    BadName(String),
    #[error("entry {name:?} has invalid dims {dims:?}")]
    BadDims { name: String, dims: Vec<u32> },
}

/// Serializes a named tensor map. Values are narrowed to `f32`.
pub fn save_tensors(map: &BTreeMap<String, Tensor>) -> Result<Vec<u8>, ContainerError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (name, tensor) in map {
        if name.is_empty() || !name.is_ascii() || name.len() > u16::MAX as usize {
            return Err(ContainerError::BadName(name.clone()));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a container, widening values back to `f64`.
pub fn load_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>, ContainerError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(ContainerError::BadVersion(version));
    }
    let count = r.u32("count")?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .ok()
            .filter(|s| !s.is_empty() && s.is_ascii())
            .ok_or_else(|| ContainerError::BadName(format!("{name_bytes:?}")))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dim")?);
        }
        if rank == 0 || dims.contains(&0) {
            return Err(ContainerError::BadDims { name, dims });
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or(ContainerError::Truncated("payload size"))?;
        let payload = r.take(numel * 4, "payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        if map
            .insert(name.clone(), Tensor::new(shape, data))
            .is_some()
        {
            return Err(ContainerError::DuplicateName(name));
        }
    }
    Ok(map)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ContainerError> {
        if self.pos + n > self.bytes.len() {
            return Err(ContainerError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, ContainerError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ContainerError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
