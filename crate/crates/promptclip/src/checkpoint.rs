//! Named-tensor checkpoint files.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then the
//! payload of little-endian `f64` tensors at the offsets the header lists.
//! The header also carries the SHA-256 of the payload, so corrupted bytes
//! are detected on load, and the checkpoint id is the SHA-256 of the
//! header bytes.

use std::path::Path;

use promptclip_core::params::Parameters;
use promptclip_core::{Model, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_at, Error, Result};

const FORMAT: &str = "promptclip-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: [usize; 2],
    pub offset: u64,
    pub nbytes: u64,
}

/// Training progress stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
    pub metadata: CheckpointMeta,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
    /// Hex SHA-256 of the header bytes.
    pub id: String,
}

pub fn checkpoint_id(header_bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(header_bytes))
}

/// Serialize a model; returns the file bytes and the checkpoint id.
pub fn encode(model: &Model, meta: &CheckpointMeta) -> (Vec<u8>, String) {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, m) in model.named_params("") {
        let offset = payload.len() as u64;
        for v in m.as_slice() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            dtype: "f64".into(),
            shape: [m.rows(), m.cols()],
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        tensors,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        metadata: meta.clone(),
    };
    let hbytes = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let id = checkpoint_id(&hbytes);
    let mut out = Vec::with_capacity(8 + hbytes.len() + payload.len());
    out.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&hbytes);
    out.extend_from_slice(&payload);
    (out, id)
}

/// Parse checkpoint bytes. `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let corrupt = |msg: String| Error::CorruptCheckpoint { path: path.to_path_buf(), msg };
    if bytes.len() < 8 {
        return Err(corrupt(format!("{} bytes is too short for a header length", bytes.len())));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if hlen > (bytes.len() - 8) as u64 {
        return Err(corrupt(format!("header length {hlen} exceeds file size {}", bytes.len())));
    }
    let hbytes = &bytes[8..8 + hlen as usize];
    let header: Header = serde_json::from_slice(hbytes).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(corrupt(format!("unsupported format {} version {}", header.format, header.version)));
    }
    let payload = &bytes[8 + hlen as usize..];
    let mut model = Model::new(header.config.clone()).map_err(|e| corrupt(format!("config: {e}")))?;
    let mut params = model.named_params_mut("");
    if params.len() != header.tensors.len() {
        return Err(corrupt(format!("header lists {} tensors, model has {}", header.tensors.len(), params.len())));
    }
    let mut expected_end = 0u64;
    for ((name, m), t) in params.iter_mut().zip(&header.tensors) {
        if t.name != *name || t.shape != [m.rows(), m.cols()] {
            return Err(corrupt(format!("tensor {} {:?} does not match model tensor {name} {:?}", t.name, t.shape, m.shape())));
        }
        if t.dtype != "f64" {
            return Err(corrupt(format!("tensor {} has dtype {}, expected f64", t.name, t.dtype)));
        }
        if (t.shape[0] * t.shape[1] * 8) as u64 != t.nbytes {
            return Err(corrupt(format!("tensor {} shape {:?} does not match {} bytes", t.name, t.shape, t.nbytes)));
        }
        let end = t.offset.checked_add(t.nbytes).filter(|&e| e <= payload.len() as u64);
        let Some(end) = end else {
            return Err(corrupt(format!("tensor {} at offset {} runs past the payload ({} bytes)", t.name, t.offset, payload.len())));
        };
        let src = &payload[t.offset as usize..end as usize];
        for (dst, chunk) in m.as_mut_slice().iter_mut().zip(src.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        expected_end = expected_end.max(end);
    }
    if expected_end != payload.len() as u64 {
        return Err(corrupt(format!("payload is {} bytes, tensors cover {expected_end}", payload.len())));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch".into()));
    }
    Ok(Checkpoint { model, meta: header.metadata, id: checkpoint_id(hbytes) })
}

/// Write atomically (temporary file then rename). Returns the checkpoint id.
pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<String> {
    let (bytes, id) = encode(model, meta);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(io_at(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_at(path))?;
    Ok(id)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(io_at(path))?;
    decode(&bytes, path)
}
