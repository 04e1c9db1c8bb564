//! Φ cache directories.
//!
//! ```text
//! <dir>/prompts.json        {"records": [{"id", "file", "source"}]}
//! <dir>/phi/<id>.dapg       f64, dims [grid rows, grid cols], values in [0, 1]
//! ```

use std::collections::HashMap;
use std::path::Path;

use dap_core::relevance::{PromptMap, PromptSource};
use dap_core::synth::Sample;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::fsutil;
use crate::grid::{Grid, GridData};

pub const MANIFEST: &str = "prompts.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: usize,
    pub file: String,
    pub source: PromptSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptManifest {
    pub records: Vec<PromptRecord>,
}

pub fn save(dir: &Path, ids: &[usize], prompts: &[PromptMap]) -> AppResult<()> {
    if ids.len() != prompts.len() {
        return Err(AppError::Usage(format!("{} ids for {} prompts", ids.len(), prompts.len())));
    }
    let mut records = Vec::with_capacity(ids.len());
    for (&id, p) in ids.iter().zip(prompts) {
        let file = format!("phi/{id:06}.dapg");
        let (r, c) = p.weights.shape();
        Grid::new(vec![r, c], GridData::F64(p.weights.data().to_vec()))?.save(&dir.join(&file))?;
        records.push(PromptRecord { id, file, source: p.source });
    }
    fsutil::write_json(&dir.join(MANIFEST), &PromptManifest { records })
}

/// Prompts for `samples`, in sample order.
pub fn load_for(dir: &Path, samples: &[Sample]) -> AppResult<Vec<PromptMap>> {
    let manifest: PromptManifest = fsutil::read_json(&dir.join(MANIFEST))?;
    let by_id: HashMap<usize, &PromptRecord> = manifest.records.iter().map(|r| (r.id, r)).collect();
    samples
        .iter()
        .map(|s| {
            let rec = by_id.get(&s.id).ok_or_else(|| AppError::FormatAt {
                path: dir.join(MANIFEST),
                message: format!("no prompt for sample {}", s.id),
            })?;
            let path = dir.join(&rec.file);
            let (dims, data) = Grid::load(&path)?.into_f64().map_err(|e| e.at(&path))?;
            if dims.len() != 2 {
                return Err(AppError::FormatAt { path, message: format!("prompt grid dims {dims:?}") });
            }
            let mut map = PromptMap::from_weights(dims[0], dims[1], data)?;
            map.source = rec.source;
            Ok(map)
        })
        .collect()
}
