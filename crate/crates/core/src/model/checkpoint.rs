//! Binary checkpoint format.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, `u64` header
//! length, a JSON header (config echo, role, tensor names and shapes), then
//! every tensor as little-endian `f32` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_model, ModelConfig, ModelParams, Role};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MDLMCKPT";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    role: Role,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let tensors = params.weights.tensors();
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        role: params.role,
        tensors: tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.tensor.shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for t in &tensors {
        for x in &t.tensor.data {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Loads a checkpoint. When `expected` is given, the stored config must match it.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelParams<f32>> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    if let Some(expected) = expected {
        if *expected != header.config {
            return Err(Error::Checkpoint(format!(
                "stored config {:?} disagrees with requested config {:?}",
                header.config, expected
            )));
        }
    }

    let mut params = init_model::<f32>(&header.config)?;
    params.role = header.role;
    let mut tensors = params.weights.tensors_mut();
    if tensors.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, file lists {}",
            tensors.len(),
            header.tensors.len()
        )));
    }
    for (slot, entry) in tensors.iter_mut().zip(&header.tensors) {
        if slot.name != entry.name || slot.tensor.shape != entry.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match layout slot {} {:?}",
                entry.name, entry.shape, slot.name, slot.tensor.shape
            )));
        }
        for x in slot.tensor.data.iter_mut() {
            input.read_exact(&mut word)?;
            *x = f32::from_le_bytes(word);
        }
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    drop(tensors);
    Ok(params)
}
