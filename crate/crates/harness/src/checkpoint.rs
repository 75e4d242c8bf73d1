//! `CPKT1` checkpoints: magic, little-endian `u32` manifest length, JSON
//! manifest, then the raw little-endian tensor payloads in manifest order.

use std::path::Path;

use cpool_core::params::ParamStore;
use cpool_core::{DType, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 5] = b"CPKT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Byte offset into the payload.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: DType,
    pub step: usize,
    pub model: ModelConfig,
    pub tensors: Vec<TensorRecord>,
}

pub fn encode<S: Scalar>(model: &ModelConfig, store: &ParamStore<S>, step: usize) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for e in store.entries() {
        let bytes = S::to_le_bytes_vec(e.value.data());
        tensors.push(TensorRecord {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            trainable: e.trainable,
            offset: payload.len(),
            bytes: bytes.len(),
        });
        payload.extend(bytes);
    }
    let manifest = serde_json::to_vec(&Manifest {
        dtype: S::DTYPE,
        step,
        model: model.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend(manifest);
    out.extend(payload);
    Ok(out)
}

pub fn save<S: Scalar>(path: &Path, model: &ModelConfig, store: &ParamStore<S>, step: usize) -> Result<()> {
    let bytes = encode(model, store, step)?;
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

/// A checkpoint read from disk, not yet bound to an element type.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    payload: Vec<u8>,
    /// Hex SHA-256 of the whole file.
    pub sha256: String,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::decode(&bytes).map_err(|reason| HarnessError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or("missing CPKT1 magic")?;
        let len_bytes: [u8; 4] = rest.get(..4).ok_or("truncated header")?.try_into().expect("4 bytes");
        let len = u32::from_le_bytes(len_bytes) as usize;
        let manifest = rest.get(4..4 + len).ok_or("truncated manifest")?;
        let manifest: Manifest = serde_json::from_slice(manifest).map_err(|e| format!("manifest: {e}"))?;
        let payload = rest[4 + len..].to_vec();
        for t in &manifest.tensors {
            let want = t.shape.iter().product::<usize>() * manifest.dtype.size_of();
            if t.bytes != want || t.offset + t.bytes > payload.len() {
                return Err(format!("tensor {} does not fit the payload", t.name));
            }
        }
        Ok(Checkpoint {
            manifest,
            payload,
            sha256: format!("{:x}", Sha256::digest(bytes)),
        })
    }

    /// Rebuilds the model and overwrites every parameter with the stored
    /// values.
    pub fn restore<S: Scalar>(&self) -> std::result::Result<(ParamStore<S>, Model), String> {
        if self.manifest.dtype != S::DTYPE {
            return Err(format!(
                "checkpoint holds {} tensors, {} requested",
                self.manifest.dtype.name(),
                S::DTYPE.name()
            ));
        }
        let (mut store, model) = self.manifest.model.build::<S>(0).map_err(|e| e.to_string())?;
        if store.len() != self.manifest.tensors.len() {
            return Err(format!(
                "model config expects {} tensors, checkpoint has {}",
                store.len(),
                self.manifest.tensors.len()
            ));
        }
        for (entry, rec) in store.entries_mut().iter_mut().zip(&self.manifest.tensors) {
            if entry.name != rec.name || entry.value.shape() != rec.shape.as_slice() || entry.trainable != rec.trainable {
                return Err(format!("tensor {} does not match the model config", rec.name));
            }
            let data = S::from_le_bytes_slice(&self.payload[rec.offset..rec.offset + rec.bytes]);
            entry.value = Tensor::new(rec.shape.clone(), data).map_err(|e| e.to_string())?;
        }
        Ok((store, model))
    }
}

pub fn load<S: Scalar>(path: &Path) -> Result<(ParamStore<S>, Model, Checkpoint)> {
    let ckpt = Checkpoint::read(path)?;
    let (store, model) = ckpt.restore::<S>().map_err(|reason| HarnessError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })?;
    Ok((store, model, ckpt))
}
