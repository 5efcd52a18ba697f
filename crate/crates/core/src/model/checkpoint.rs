//! Self-describing binary checkpoint.
//!
//! Layout: the 8-byte magic, a little-endian `u32` format version, a
//! little-endian `u64` header length, a UTF-8 JSON header (model config,
//! normalization statistics, metadata, and the name/kind/shape of every
//! tensor in order), then all tensor values as little-endian `f64` in
//! row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TsbParams};
use crate::error::{Error, Result};
use crate::params::ParamKind;
use crate::tensor::Tensor;
use crate::training::NormStats;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TSBCKPT\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    norm: NormStats,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// Trained parameters together with the statistics needed to use them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: TsbParams,
    pub norm: NormStats,
    /// Free-form provenance such as the producing config hash.
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.params.store;
        let header = Header {
            config: self.params.config.clone(),
            norm: self.norm,
            metadata: self.metadata.clone(),
            tensors: store
                .ids()
                .map(|id| TensorEntry {
                    name: store.name(id).to_string(),
                    kind: store.kind(id),
                    shape: store.get(id).shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * store.num_elements());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in store.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| Error::format("checkpoint truncated"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("not a TSB checkpoint (bad magic)"));
        }
        let mut word = [0u8; 4];
        bytes.read_exact(&mut word).map_err(|_| Error::format("checkpoint truncated"))?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        bytes.read_exact(&mut len).map_err(|_| Error::format("checkpoint truncated"))?;
        let len = u64::from_le_bytes(len) as usize;
        if bytes.len() < len {
            return Err(Error::format("checkpoint header truncated"));
        }
        let header: Header = serde_json::from_slice(&bytes[..len])?;
        let mut payload = &bytes[len..];

        let mut params = TsbParams::init(&header.config, 0)?;
        if header.tensors.len() != params.store.len() {
            return Err(Error::format(format!(
                "checkpoint has {} tensors, config implies {}",
                header.tensors.len(),
                params.store.len()
            )));
        }
        for entry in &header.tensors {
            let id = params
                .store
                .find(&entry.name)
                .ok_or_else(|| Error::format(format!("unknown tensor {}", entry.name)))?;
            let n: usize = entry.shape.iter().product();
            if payload.len() < 8 * n {
                return Err(Error::format("checkpoint payload truncated"));
            }
            let data = payload[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            payload = &payload[8 * n..];
            params.store.set(id, Tensor::new(entry.shape.clone(), data)?)?;
        }
        if !payload.is_empty() {
            return Err(Error::format("trailing bytes after checkpoint payload"));
        }
        Ok(Checkpoint {
            params,
            norm: header.norm,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
