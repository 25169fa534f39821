//! Binary parameter checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "GCF1"  u32 version  [u8; 32] architecture digest  u32 tensor count
//! per tensor: u32 name length, UTF-8 name, u32 rank, rank × u32 dims, f32 data
//! ```
//!
//! Tensors are written in name order. Values are always stored as 32-bit
//! floats; 64-bit parameters are rounded on save.

use std::path::Path;

use gcf_core::model::{ModelConfig, ModelParams};
use gcf_core::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"GCF1";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(usize),
    #[error("tensor name is not UTF-8")]
    BadName,
    #[error("checkpoint was written for a different model (digest {found}, expected {expected})")]
    DigestMismatch { expected: String, found: String },
    #[error("tensor `{name}`: {msg}")]
    Shape { name: String, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub tensors: Vec<StoredTensor>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl Checkpoint {
    pub fn from_params<T: Real>(config: &ModelConfig, params: &ModelParams<T>) -> Self {
        Checkpoint {
            digest: config.digest(),
            tensors: params
                .iter()
                .map(|(name, t)| StoredTensor {
                    name: name.to_string(),
                    dims: t.shape().to_vec(),
                    data: t.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::BadName)?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or(CheckpointError::Truncated(bytes.len()))?;
            let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated(bytes.len()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(StoredTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        Ok(Checkpoint { digest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn digest_hex(&self) -> String {
        hex(&self.digest)
    }

    /// Checks the digest and every tensor shape against `config`, then
    /// converts to parameters of the requested precision.
    pub fn to_params<T: Real>(&self, config: &ModelConfig) -> Result<ModelParams<T>, CheckpointError> {
        let expected = config.digest();
        if expected != self.digest {
            return Err(CheckpointError::DigestMismatch {
                expected: hex(&expected),
                found: hex(&self.digest),
            });
        }
        let specs = config.param_specs();
        let mut params = ModelParams::new();
        for t in &self.tensors {
            let spec = specs.iter().find(|s| s.name == t.name).ok_or_else(|| {
                CheckpointError::Shape {
                    name: t.name.clone(),
                    msg: "not part of this model".into(),
                }
            })?;
            if spec.shape != t.dims {
                return Err(CheckpointError::Shape {
                    name: t.name.clone(),
                    msg: format!("stored shape {:?}, model expects {:?}", t.dims, spec.shape),
                });
            }
            let data = t.data.iter().map(|&v| T::lit(v as f64)).collect();
            let tensor = Tensor::new(t.dims.clone(), data).map_err(|e| CheckpointError::Shape {
                name: t.name.clone(),
                msg: e.to_string(),
            })?;
            params.insert(t.name.clone(), tensor);
        }
        if let Some(missing) = specs.iter().find(|s| params.get(&s.name).is_none()) {
            return Err(CheckpointError::Shape {
                name: missing.name.clone(),
                msg: "missing from checkpoint".into(),
            });
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gcf_core::graph::GraphVariant;
    use gcf_core::GcfModel;

    fn tiny() -> (ModelConfig, ModelParams<f32>) {
        let config = ModelConfig::tiny(GraphVariant::V1);
        let params = GcfModel::new(config.clone()).unwrap().init_params(3);
        (config, params)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (config, params) = tiny();
        let bytes = Checkpoint::from_params(&config, &params).to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
        let restored: ModelParams<f32> = loaded.to_params(&config).unwrap();
        for (name, t) in params.iter() {
            assert_eq!(restored.get(name).unwrap().data(), t.data());
        }
    }

    #[test]
    fn header_layout() {
        let (config, params) = tiny();
        let bytes = Checkpoint::from_params(&config, &params).to_bytes();
        assert_eq!(&bytes[..4], b"GCF1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8..40], config.digest());
        let count = u32::from_le_bytes(bytes[40..44].try_into().unwrap());
        assert_eq!(count as usize, params.len());
    }

    #[test]
    fn other_variant_is_a_digest_mismatch() {
        let (config, params) = tiny();
        let ckpt = Checkpoint::from_params(&config, &params);
        let other = ModelConfig::tiny(GraphVariant::V2);
        assert!(matches!(
            ckpt.to_params::<f32>(&other),
            Err(CheckpointError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn corrupt_inputs() {
        let (config, params) = tiny();
        let bytes = Checkpoint::from_params(&config, &params).to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&extra),
            Err(CheckpointError::Trailing(1))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"PNG\0"),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (config, params) = tiny();
        let mut ckpt = Checkpoint::from_params(&config, &params);
        ckpt.tensors[0].dims.push(1);
        assert!(matches!(
            ckpt.to_params::<f32>(&config),
            Err(CheckpointError::Shape { .. })
        ));
    }
}
