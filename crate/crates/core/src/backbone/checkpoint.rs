//! Checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ROIMTCK\0"            8-byte magic
//! u64                     header length in bytes
//! header                  JSON: {"meta": ArchiveMeta, "arrays": [{"name", "shape"}, ...]}
//! data                    every array's values in header order, dtype from meta
//! ```
//!
//! Array names are prefixed by their group, e.g. `student/head.weight`,
//! `teacher/...`, `adam.m/...`, `adam.v/...`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Architecture;
use super::params::{ModelParams, Tensor};
use super::scalar::Scalar;
use crate::error::{Error, Result};

pub const ARCHIVE_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ROIMTCK\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub version: u32,
    pub architecture: Architecture,
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub dtype: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl ArchiveMeta {
    pub fn new<F: Scalar>(architecture: Architecture, epoch: usize, step: u64, seed: u64) -> Self {
        ArchiveMeta {
            version: ARCHIVE_VERSION,
            architecture,
            epoch,
            step,
            seed,
            dtype: F::DTYPE.to_string(),
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: ArchiveMeta,
    arrays: Vec<ArrayHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive<F> {
    pub meta: ArchiveMeta,
    pub arrays: Vec<Tensor<F>>,
}

impl<F: Scalar> Archive<F> {
    pub fn new(meta: ArchiveMeta) -> Self {
        Archive {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push_group(&mut self, group: &str, params: &ModelParams<F>) {
        for t in &params.tensors {
            self.arrays.push(Tensor {
                name: format!("{group}/{}", t.name),
                shape: t.shape.clone(),
                data: t.data.clone(),
            });
        }
    }

    pub fn has_group(&self, group: &str) -> bool {
        let prefix = format!("{group}/");
        self.arrays.iter().any(|t| t.name.starts_with(&prefix))
    }

    /// Extracts one group, stripping the prefix, in archive order.
    pub fn group(&self, group: &str) -> Result<ModelParams<F>> {
        let prefix = format!("{group}/");
        let tensors: Vec<Tensor<F>> = self
            .arrays
            .iter()
            .filter_map(|t| {
                t.name.strip_prefix(&prefix).map(|n| Tensor {
                    name: n.to_string(),
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                })
            })
            .collect();
        if tensors.is_empty() {
            return Err(Error::Checkpoint(format!("no group {group:?} in archive")));
        }
        Ok(ModelParams { tensors })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|t| ArrayHeader {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let values: usize = self.arrays.iter().map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + values * F::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.arrays {
            for &v in &t.data {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.meta.version != ARCHIVE_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported archive version {}",
                header.meta.version
            )));
        }
        if header.meta.dtype != F::DTYPE {
            return Err(Error::Checkpoint(format!(
                "archive holds {} values, requested {}",
                header.meta.dtype,
                F::DTYPE
            )));
        }
        let mut pos = 16 + hlen;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for a in header.arrays {
            let n: usize = a.shape.iter().product();
            let end = pos + n * F::BYTES;
            let raw = bytes.get(pos..end).ok_or_else(|| bad("truncated data"))?;
            let data = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
            arrays.push(Tensor {
                name: a.name,
                shape: a.shape,
                data,
            });
            pos = end;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after data"));
        }
        Ok(Archive {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
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
    use crate::backbone::Network;
    use rand::SeedableRng;

    #[test]
    fn round_trip_bit_exact() {
        let arch = Architecture::Plain {
            input_size: 8,
            widths: vec![3, 4],
        };
        let net = Network::new(arch.clone()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let p: ModelParams<f32> = net.init_params(&mut rng);
        let mut meta = ArchiveMeta::new::<f32>(arch, 3, 42, 7);
        meta.extra.insert("note".into(), "x".into());
        let mut a = Archive::new(meta);
        a.push_group("student", &p);
        a.push_group("teacher", &p);
        let bytes = a.to_bytes().unwrap();
        let back = Archive::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.group("teacher").unwrap(), p);
        assert!(back.group("adam.m").is_err());
        assert!(Archive::<f64>::from_bytes(&bytes).is_err());
        assert!(Archive::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
