//! Binary checkpoint format.
//!
//! Layout: the magic bytes `TACO`, a little-endian `u32` version, a
//! little-endian `u64` metadata length, the metadata as JSON (configuration
//! snapshot, step, random-stream state and a tensor manifest of name, shape,
//! dtype and byte offset), then every tensor as raw little-endian `f64`
//! values in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TACO";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

/// State of the keyed random streams: everything is derived from the seed
/// and the number of completed steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    config: serde_json::Value,
    step: u64,
    rng: RngState,
    tensors: Vec<ManifestEntry>,
}

/// Named tensors plus the run state they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub step: u64,
    pub rng: RngState,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value, step: u64, rng: RngState) -> Self {
        Checkpoint {
            config,
            step,
            rng,
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor; names must be unique.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensor(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let manifest = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let entry = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                entry
            })
            .collect();
        let meta = Metadata {
            config: self.config.clone(),
            step: self.step,
            rng: self.rng,
            tensors: manifest,
        };
        let meta = serde_json::to_vec_pretty(&meta)
            .map_err(|e| Error::Checkpoint(format!("cannot encode metadata: {e}")))?;
        let mut out = Vec::with_capacity(16 + meta.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing TACO magic header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated metadata block"))?;
        let meta: Metadata = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| Error::Checkpoint(format!("invalid metadata: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        let mut expected_offset = 0u64;
        for entry in meta.tensors {
            if entry.dtype != "f64" {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has unsupported dtype {}",
                    entry.name, entry.dtype
                )));
            }
            if entry.offset != expected_offset {
                return Err(Error::Checkpoint(format!("tensor `{}` has a non-contiguous offset", entry.name)));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 8 * n;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` is truncated", entry.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
            expected_offset = end as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Checkpoint {
            config: meta.config,
            step: meta.step,
            rng: meta.rng,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(
            serde_json::json!({"lr": 1e-4, "variant": "taco", "nested": {"x": [1, 2.5]}}),
            17,
            RngState { seed: 3, next_step: 17 },
        );
        c.push("a", Tensor::new(vec![2, 2], vec![0.1, -2.0, f64::MIN_POSITIVE, 1e300]).unwrap())
            .unwrap();
        c.push("b", Tensor::vector(vec![std::f64::consts::PI])).unwrap();
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..4], b"TACO");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/c.taco");
        sample().save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        back.save(&dir.path().join("d.taco")).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(dir.path().join("d.taco")).unwrap()
        );
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong_magic).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(Checkpoint::from_bytes(&v2).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut c = sample();
        assert!(c.push("a", Tensor::scalar(1.0)).is_err());
    }
}
