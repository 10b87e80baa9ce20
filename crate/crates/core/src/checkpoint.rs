//! Parameter checkpoint file: a JSON header (shapes, model config,
//! epoch, seed) followed by little-endian f32 blobs per parameter in
//! header order.

use crate::error::{Error, Result};
use crate::model::{HaanParams, ModelConfig, NUM_PARAMS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

const CHECKPOINT_MAGIC: &[u8; 8] = b"HAANCKPT";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub config: ModelConfig,
    pub epoch: usize,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

pub fn save_checkpoint<S: Scalar>(
    params: &HaanParams<S>,
    epoch: usize,
    seed: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let header = CheckpointHeader {
        format: 1,
        config: params.config.clone(),
        epoch,
        seed,
        params: params
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.to_string(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for p in params.params() {
        for v in p.value.values() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(HaanParams<f32>, CheckpointHeader)> {
    let bytes = fs::read(&path)?;
    if bytes.len() < 12 || &bytes[0..8] != CHECKPOINT_MAGIC {
        return Err(Error::ArtifactMismatch(format!(
            "{} is not a checkpoint file",
            path.as_ref().display()
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::ArtifactMismatch("checkpoint header truncated".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])?;
    if header.params.len() != NUM_PARAMS {
        return Err(Error::ArtifactMismatch(format!(
            "checkpoint lists {} parameters, expected {}",
            header.params.len(),
            NUM_PARAMS
        )));
    }
    let mut offset = 12 + header_len;
    let mut tensors = Vec::with_capacity(NUM_PARAMS);
    for entry in &header.params {
        let numel: usize = entry.shape.iter().product();
        let end = offset + numel * 4;
        if end > bytes.len() {
            return Err(Error::ArtifactMismatch(format!(
                "checkpoint blob for '{}' truncated",
                entry.name
            )));
        }
        let values: Vec<f32> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::from_values(&entry.shape, values)?);
        offset = end;
    }
    let params = HaanParams::from_tensors(header.config.clone(), tensors)?;
    Ok((params, header))
}
