//! `EGW1` parameter checkpoints.
//!
//! Layout: the 4 magic bytes `EGW1`, a u32-LE header length, a UTF-8 JSON
//! header listing parameter names and shapes in order (plus an opaque
//! `meta` value), then every parameter's f64-LE data concatenated in
//! header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EGW1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("checkpoint header is not valid JSON: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    params: Vec<CheckpointEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A decoded checkpoint: parameters plus whatever metadata the writer
/// attached (model configuration, for instance).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            params: self
                .params
                .names()
                .iter()
                .zip(self.params.tensors())
                .map(|(n, t)| CheckpointEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + 8 * self.params.numel());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 {
            return Err(CheckpointError::Truncated {
                needed: 8,
                have: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() < hlen {
            return Err(CheckpointError::Truncated {
                needed: 8 + hlen,
                have: bytes.len(),
            });
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let data = &body[hlen..];
        let mut total: usize = 0;
        for e in &header.params {
            let n = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| {
                    CheckpointError::Inconsistent(format!("shape {:?} overflows", e.shape))
                })?;
            total = total
                .checked_add(n)
                .ok_or_else(|| CheckpointError::Inconsistent("total size overflows".into()))?;
        }
        if data.len() < total {
            return Err(CheckpointError::Truncated {
                needed: 8 + hlen + total,
                have: bytes.len(),
            });
        }
        if data.len() > total {
            return Err(CheckpointError::Inconsistent(format!(
                "{} trailing bytes",
                data.len() - total
            )));
        }
        let mut params = ParamStore::new();
        let mut offset = 0;
        for e in header.params {
            let n: usize = e.shape.iter().product();
            let values = data[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += 8 * n;
            let t = Tensor::new(e.shape, values)
                .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
            params.push(e.name, t);
        }
        Ok(Checkpoint {
            params,
            meta: header.meta,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ckpt.encode())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::decode(&std::fs::read(path)?)
}
