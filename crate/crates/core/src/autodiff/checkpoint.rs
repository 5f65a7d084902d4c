//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `TDDANCKP` |
//! | 8     | `u64` length `H` of the JSON header |
//! | H     | UTF-8 JSON header |
//! | rest  | `f64` values, little-endian, tensors concatenated in header order |
//!
//! The header is `{"format_version": 1, "config": <any JSON>, "tensors":
//! [{"name", "shape", "offset", "count"}]}` where `offset` and `count` are in
//! `f64` elements from the start of the data section. Values are stored
//! row-major as raw IEEE-754 bits, so a round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TDDANCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint: the header config and `(name, shape, values)` triples.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: serde_json::Value) -> Self {
        Checkpoint {
            config,
            tensors: store
                .iter()
                .map(|p| (p.name.clone(), p.shape.clone(), p.values.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, shape, values) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                count: values.len(),
            });
            offset += values.len();
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, values) in &self.tensors {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, message: &str| Error::Parse {
            offset: offset as u64,
            message: message.into(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(parse(0, "missing checkpoint magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(hlen)
            .filter(|end| *end <= bytes.len())
            .ok_or_else(|| parse(8, "header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start]).map_err(|e| parse(16, &e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(parse(16, &format!("unsupported format version {}", header.format_version)));
        }
        let data = &bytes[data_start..];
        if data.len() % 8 != 0 {
            return Err(parse(data_start, "data section is not a whole number of f64 values"));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            if t.count != t.shape.iter().product::<usize>() {
                return Err(parse(16, &format!("tensor {} count does not match shape", t.name)));
            }
            let (lo, hi) = (t.offset * 8, (t.offset + t.count) * 8);
            if hi > data.len() {
                return Err(parse(data_start + data.len(), &format!("tensor {} truncated", t.name)));
            }
            let values = data[lo..hi]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((t.name, t.shape, values));
        }
        Ok(Checkpoint {
            config: header.config,
            tensors,
        })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        crate::io::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Streams a checkpoint to any writer.
pub fn write_to(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    w.write_all(&bytes).map_err(|e| Error::io("<writer>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::Parameter;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.add(Parameter::new("a", &[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]));
        s.add(Parameter::new("b", &[3], vec![std::f64::consts::PI, -1.5, 0.1]));
        let ck = Checkpoint::from_store(&s, serde_json::json!({"kind": "test"}));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.config, ck.config);
        for ((_, _, a), (_, _, b)) in ck.tensors.iter().zip(&back.tensors) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut s = ParamStore::new();
        s.add(Parameter::new("a", &[4], vec![1.0; 4]));
        let bytes = Checkpoint::from_store(&s, serde_json::Value::Null).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Parse { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]), Err(Error::Parse { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::Parse { offset: 0, .. })));
    }
}
