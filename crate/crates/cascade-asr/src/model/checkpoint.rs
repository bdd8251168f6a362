//! Checkpoint serialization: a JSON header describing the model
//! configuration and parameter layout, followed by all parameter
//! values as little-endian f64.  Writes go to a temporary file in the
//! destination directory and are renamed into place, so a checkpoint
//! path never holds a half-written file.

use super::{Model, ModelConfig};
use crate::numerics::Tensor;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &str = "cascade-asr-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Element offset into the f64 payload.
    offset: usize,
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    for (name, tensor) in model.store().iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            rows: tensor.rows(),
            cols: tensor.cols(),
            offset: payload.len(),
        });
        payload.extend_from_slice(tensor.data());
    }
    let header = Header {
        magic: MAGIC.to_string(),
        version: VERSION,
        config: model.config().clone(),
        params: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        let mut raw = Vec::with_capacity(payload.len() * 8);
        for v in &payload {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&raw)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let mut f = std::fs::File::open(path)?;
    let file_len = f.metadata()?.len();
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint("file too short for header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes);
    if header_len.saturating_add(8) > file_len {
        return Err(Error::Checkpoint(format!(
            "header length {header_len} exceeds file size {file_len}"
        )));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    f.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.magic != MAGIC {
        return Err(Error::Checkpoint(format!("unrecognized magic '{}'", header.magic)));
    }
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }

    let mut raw = Vec::new();
    f.read_to_end(&mut raw)?;
    if raw.len() % 8 != 0 {
        return Err(Error::Checkpoint("payload is not a whole number of f64".into()));
    }
    let payload: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut tensors = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let n = e.rows * e.cols;
        let end = e.offset.checked_add(n).filter(|&end| end <= payload.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!("parameter '{}' overruns payload", e.name))
        })?;
        let tensor = Tensor::new(e.rows, e.cols, payload[e.offset..end].to_vec())
            .map_err(|err| Error::Checkpoint(format!("parameter '{}': {err}", e.name)))?;
        tensors.push((e.name.clone(), tensor));
    }

    let mut model = Model::new(&header.config, 0)?;
    model.store_mut().restore(tensors)?;
    Ok(model)
}
