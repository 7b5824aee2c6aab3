//! Versioned binary model checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, JSON header
//! (architecture, training metadata, tensor shapes), the parameters as
//! little-endian `f64`s in layer order, then a SHA-256 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{io_err, write_atomic, WorkbenchError};
use crate::kernel::Tensor;
use crate::nets::{ArchitectureSpec, Model, TrainMeta};

pub const MAGIC: &[u8; 8] = b"SEMLABCK";
pub const VERSION: u32 = 1;
const DIGEST: usize = 32;
const PREFIX: usize = 8 + 4 + 8;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchitectureSpec,
    meta: TrainMeta,
    shapes: Vec<Vec<Vec<usize>>>,
}

pub fn encode(model: &Model) -> Vec<u8> {
    let header = Header {
        arch: model.arch().clone(),
        meta: model.meta().clone(),
        shapes: model
            .params()
            .iter()
            .map(|layer| layer.iter().map(|t| t.shape().to_vec()).collect())
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params().iter().flatten() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model, WorkbenchError> {
    let p = || path.to_path_buf();
    let malformed = |reason: String| WorkbenchError::Malformed { path: p(), reason };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(WorkbenchError::BadMagic { path: p() });
    }
    if bytes.len() < PREFIX + DIGEST {
        return Err(WorkbenchError::Truncated { path: p(), len: bytes.len() });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(WorkbenchError::VersionMismatch {
            path: p(),
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_end = bytes.len() - DIGEST;
    if header_len > body_end - PREFIX {
        return Err(WorkbenchError::Truncated { path: p(), len: bytes.len() });
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(WorkbenchError::Checksum { path: p() });
    }
    let header: Header =
        serde_json::from_slice(&bytes[PREFIX..PREFIX + header_len]).map_err(|e| malformed(e.to_string()))?;
    let blob = &bytes[PREFIX + header_len..body_end];
    let total: usize = header.shapes.iter().flatten().map(|s| s.iter().product::<usize>()).sum();
    if blob.len() != total * 8 {
        return Err(WorkbenchError::Truncated { path: p(), len: bytes.len() });
    }
    let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut params = Vec::with_capacity(header.shapes.len());
    for layer in &header.shapes {
        let mut tensors = Vec::with_capacity(layer.len());
        for shape in layer {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            tensors.push(Tensor::new(shape.clone(), data).map_err(|e| malformed(e.to_string()))?);
        }
        params.push(tensors);
    }
    Ok(Model::from_parts(header.arch, params, header.meta)?)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), WorkbenchError> {
    write_atomic(path, &encode(model))
}

pub fn load_checkpoint(path: &Path) -> Result<Model, WorkbenchError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}
