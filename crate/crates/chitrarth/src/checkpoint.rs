//! Checkpoint files.
//!
//! Byte layout: `CHKP` magic, format version (u32 LE), header length
//! (u32 LE), a UTF-8 JSON header (config echo, stage, step, seed, metric
//! snapshot, parameter directory), then every parameter blob as 32-bit
//! little-endian floats in directory order. Saving is deterministic, so
//! save → load → save is byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChitrarthModel, ModelConfig};

const MAGIC: &[u8; 4] = b"CHKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub stage: u8,
    pub step: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub step: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

pub fn save_checkpoint(path: &Path, model: &ChitrarthModel, meta: &CheckpointMeta) -> Result<()> {
    let mut params = Vec::new();
    let mut blob_bytes: Vec<u8> = Vec::new();
    model.visit_params(&mut |name, p| {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: p.shape.clone(),
        });
        for v in &p.data {
            blob_bytes.extend_from_slice(&v.to_le_bytes());
        }
    });

    let header = CheckpointHeader {
        config: model.config.clone(),
        stage: meta.stage,
        step: meta.step,
        seed: meta.seed,
        metrics: meta.metrics.clone(),
        params,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    out.write_all(&blob_bytes)?;
    out.flush()?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut file = std::fs::File::open(path)?;
    let mut prefix = [0u8; 12];
    file.read_exact(&mut prefix)
        .map_err(|_| Error::CheckpointFormat("file shorter than preamble".into()))?;
    if &prefix[0..4] != MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(prefix[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointFormat(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(prefix[8..12].try_into().unwrap()) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| Error::CheckpointFormat("truncated header".into()))?;
    serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::CheckpointFormat(format!("header parse: {e}")))
}

/// Rebuilds a model from a checkpoint: the header's config echo drives
/// construction and every blob round-trips bitwise.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ChitrarthModel)> {
    let header = read_header(path)?;
    let mut model = ChitrarthModel::init(header.config.clone(), 0)?;
    load_blobs_into(path, &header, &mut model)?;
    Ok((header, model))
}

/// Loads parameters into an existing model; the header config must match
/// the model config exactly.
pub fn load_into(path: &Path, model: &mut ChitrarthModel) -> Result<CheckpointHeader> {
    let header = read_header(path)?;
    if header.config != model.config {
        return Err(Error::CheckpointConfig(format!(
            "checkpoint was written for a different config (checkpoint lm d_model {}, model lm d_model {})",
            header.config.lm.d_model, model.config.lm.d_model
        )));
    }
    load_blobs_into(path, &header, model)?;
    Ok(header)
}

fn load_blobs_into(path: &Path, header: &CheckpointHeader, model: &mut ChitrarthModel) -> Result<()> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 {
        return Err(Error::CheckpointFormat("file shorter than preamble".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;

    let mut directory: BTreeMap<&str, (usize, &[usize])> = BTreeMap::new();
    let mut cursor = 12 + header_len;
    for entry in &header.params {
        let numel: usize = entry.shape.iter().product();
        directory.insert(entry.name.as_str(), (cursor, &entry.shape));
        cursor += numel * 4;
    }
    if cursor > bytes.len() {
        return Err(Error::CheckpointFormat(format!(
            "blob section truncated: need {} bytes, file has {}",
            cursor,
            bytes.len()
        )));
    }

    let mut missing = Vec::new();
    model.visit_params_mut(&mut |name, p| {
        let Some(&(at, shape)) = directory.get(name) else {
            missing.push(name.to_string());
            return;
        };
        if shape != p.shape.as_slice() {
            missing.push(format!("{name} (shape mismatch)"));
            return;
        }
        for (i, v) in p.data.iter_mut().enumerate() {
            let b = &bytes[at + i * 4..at + i * 4 + 4];
            *v = f32::from_le_bytes(b.try_into().unwrap());
        }
    });
    if !missing.is_empty() {
        return Err(Error::CheckpointFormat(format!(
            "parameters missing or mismatched: {missing:?}"
        )));
    }
    Ok(())
}
