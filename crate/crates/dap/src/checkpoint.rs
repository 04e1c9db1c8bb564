//! Checkpoint container.
//!
//! ```text
//! 4 bytes   magic "DAPK"
//! 4 bytes   u32 LE length N of the JSON header
//! N bytes   UTF-8 JSON: {"version", "model", "tensors": [{"name", "rows", "cols"}], "meta"}
//! ...       one f64 DAPG grid (dims [rows, cols]) per tensor, in header order
//! ```

use std::path::Path;

use dap_core::model::{Model, ModelConfig};
use dap_core::params::ParamStore;
use dap_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::fsutil;
use crate::grid::{Grid, GridData};

pub const MAGIC: &[u8; 4] = b"DAPK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (stage, training config).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode(model: &Model, meta: serde_json::Value) -> AppResult<Vec<u8>> {
    let tensors = model
        .params
        .iter()
        .map(|(name, t)| TensorEntry { name: name.to_string(), rows: t.rows(), cols: t.cols() })
        .collect();
    let header = Header { version: VERSION, model: model.config().clone(), tensors, meta };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        let g = Grid::new(vec![t.rows(), t.cols()], GridData::F64(t.data().to_vec()))?;
        g.write_to(&mut out).expect("writing to a Vec cannot fail");
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> AppResult<(Model, Header)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(AppError::Format("not a checkpoint (bad magic)".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let json = bytes
        .get(8..8 + n)
        .ok_or_else(|| AppError::Format("truncated checkpoint header".into()))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| AppError::Format(format!("checkpoint header: {e}")))?;
    if header.version != VERSION {
        return Err(AppError::Format(format!("unsupported checkpoint version {}", header.version)));
    }
    let mut rest = &bytes[8 + n..];
    let mut store = ParamStore::new();
    for entry in &header.tensors {
        let (dims, data) = Grid::read_from(&mut rest)?.into_f64()?;
        if dims != [entry.rows, entry.cols] {
            return Err(AppError::Format(format!(
                "tensor {}: header says {}×{}, grid has {dims:?}",
                entry.name, entry.rows, entry.cols
            )));
        }
        store.push(entry.name.clone(), Tensor::from_vec(entry.rows, entry.cols, data)?);
    }
    if !rest.is_empty() {
        return Err(AppError::Format(format!("{} trailing bytes in checkpoint", rest.len())));
    }
    let model = Model::from_params(header.model.clone(), &store)?;
    Ok((model, header))
}

pub fn save(path: &Path, model: &Model, meta: serde_json::Value) -> AppResult<()> {
    fsutil::write_atomic(path, &encode(model, meta)?)
}

pub fn load(path: &Path) -> AppResult<(Model, Header)> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode(&bytes).map_err(|e| e.at(path))
}
