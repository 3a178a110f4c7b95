//! Versioned binary checkpoint.
//!
//! ```text
//! magic      8 bytes  "MPRBCKPT"
//! version    u32 LE   currently 1
//! header_len u32 LE
//! header     JSON     {"config": ModelConfig, "step_count": u64, "tensors": [{"name", "shape"}]}
//! data       f32 LE   every tensor in header order, row-major
//! ```
//! Nothing may follow the data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TensorSpec};
use super::model::ModelState;
use super::LmError;
use crate::util::sha256_hex;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MPRBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step_count: u64,
    tensors: Vec<TensorSpec>,
}

impl ModelState {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = Header { config: self.config().clone(), step_count: self.step_count, tensors: self.tensors().to_vec() };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for &p in self.params() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<ModelState, LmError> {
        let fmt = |m: &str| LmError::Format(m.to_string());
        if bytes.len() < 16 {
            return Err(fmt("file shorter than the fixed header"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(LmError::Format(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(fmt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| LmError::Format(format!("bad header: {e}")))?;
        let data = &body[hlen..];
        let mut model = ModelState::zeros(header.config.clone())?;
        let expect: Vec<(&str, &[usize])> =
            model.tensors().iter().map(|t| (t.name.as_str(), t.shape.as_slice())).collect();
        let got: Vec<(&str, &[usize])> =
            header.tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice())).collect();
        if expect != got {
            return Err(fmt("tensor table does not match config"));
        }
        let n = model.num_params();
        if data.len() < 4 * n {
            return Err(LmError::Format(format!("truncated data: {} of {} bytes", data.len(), 4 * n)));
        }
        if data.len() > 4 * n {
            return Err(fmt("trailing bytes after tensor data"));
        }
        for (p, chunk) in model.params_mut().iter_mut().zip(data.chunks_exact(4)) {
            *p = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        if !model.is_finite() {
            return Err(fmt("non-finite parameter"));
        }
        model.step_count = header.step_count;
        Ok(model)
    }

    /// SHA-256 of the checkpoint serialization; stable across save/load.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_checkpoint_bytes())
    }

    /// Copy with every parameter rounded to `f32`, i.e. what a checkpoint
    /// roundtrip yields.
    pub fn rounded_to_f32(&self) -> ModelState {
        let mut m = self.clone();
        m.params_mut().iter_mut().for_each(|p| *p = *p as f32 as f64);
        m
    }
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<(), LmError> {
    fs::write(path, model.to_checkpoint_bytes()).map_err(|source| LmError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState, LmError> {
    let bytes = fs::read(path).map_err(|source| LmError::Io { path: path.display().to_string(), source })?;
    ModelState::from_checkpoint_bytes(&bytes)
}
