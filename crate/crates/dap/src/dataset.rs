//! Dataset directories.
//!
//! ```text
//! <dir>/manifest.json          array of sample records
//! <dir>/synth.json             generator config the split was drawn with
//! <dir>/images/<id>.dapg       f32, dims [C, H, W]
//! <dir>/masks/<id>_c<k>.dapg   u8 (0/1), dims [H, W], one per referenced class
//! ```
//!
//! Paths inside the manifest are relative to the directory.

use std::path::Path;

use dap_core::synth::{Image, Mask, Sample, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::fsutil;
use crate::grid::{Grid, GridData};

pub const MANIFEST: &str = "manifest.json";
pub const SYNTH_CONFIG: &str = "synth.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub image_file: String,
    pub mask_files: Vec<String>,
    pub class_ids: Vec<usize>,
    pub text_tokens: Vec<u32>,
    pub lesion_area: usize,
    pub lesion_count: usize,
}

pub fn image_grid(image: &Image) -> AppResult<Grid> {
    Grid::new(
        vec![image.channels, image.height, image.width],
        GridData::F32(image.data.clone()),
    )
}

pub fn mask_grid(mask: &Mask) -> AppResult<Grid> {
    Grid::new(vec![mask.height, mask.width], GridData::U8(mask.data.clone()))
}

pub fn image_from_grid(grid: Grid) -> AppResult<Image> {
    let (dims, data) = grid.into_f32()?;
    if dims.len() != 3 {
        return Err(AppError::Format(format!("image grid must be C×H×W, got dims {dims:?}")));
    }
    Ok(Image { channels: dims[0], height: dims[1], width: dims[2], data })
}

pub fn mask_from_grid(grid: Grid) -> AppResult<Mask> {
    let (dims, data) = grid.into_u8()?;
    if dims.len() != 2 {
        return Err(AppError::Format(format!("mask grid must be H×W, got dims {dims:?}")));
    }
    if data.iter().any(|&b| b > 1) {
        return Err(AppError::Format("mask values must be 0 or 1".into()));
    }
    Ok(Mask { height: dims[0], width: dims[1], data })
}

/// Writes every sample file, then the manifest last.
pub fn save(dir: &Path, samples: &[Sample], config: Option<&SynthConfig>) -> AppResult<Vec<SampleRecord>> {
    fsutil::create_dir(dir)?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let image_file = format!("images/{:06}.dapg", s.id);
        image_grid(&s.image)?.save(&dir.join(&image_file))?;
        let mut mask_files = Vec::with_capacity(s.masks.len());
        for (mask, class) in s.masks.iter().zip(&s.class_ids) {
            let f = format!("masks/{:06}_c{}.dapg", s.id, class);
            mask_grid(mask)?.save(&dir.join(&f))?;
            mask_files.push(f);
        }
        records.push(SampleRecord {
            id: s.id,
            image_file,
            mask_files,
            class_ids: s.class_ids.clone(),
            text_tokens: s.text_tokens.clone(),
            lesion_area: s.lesion_area,
            lesion_count: s.lesion_count,
        });
    }
    if let Some(c) = config {
        fsutil::write_json(&dir.join(SYNTH_CONFIG), c)?;
    }
    fsutil::write_json(&dir.join(MANIFEST), &records)?;
    Ok(records)
}

pub fn load_manifest(dir: &Path) -> AppResult<Vec<SampleRecord>> {
    fsutil::read_json(&dir.join(MANIFEST))
}

pub fn load(dir: &Path) -> AppResult<Vec<Sample>> {
    load_manifest(dir)?
        .into_iter()
        .map(|r| {
            let path = dir.join(&r.image_file);
            let image = image_from_grid(Grid::load(&path)?).map_err(|e| e.at(&path))?;
            if r.mask_files.len() != r.class_ids.len() {
                return Err(AppError::FormatAt {
                    path: dir.join(MANIFEST),
                    message: format!("sample {}: {} masks for {} classes", r.id, r.mask_files.len(), r.class_ids.len()),
                });
            }
            let masks = r
                .mask_files
                .iter()
                .map(|f| {
                    let path = dir.join(f);
                    mask_from_grid(Grid::load(&path)?).map_err(|e| e.at(&path))
                })
                .collect::<AppResult<Vec<_>>>()?;
            Ok(Sample {
                id: r.id,
                image,
                text_tokens: r.text_tokens,
                class_ids: r.class_ids,
                masks,
                lesion_area: r.lesion_area,
                lesion_count: r.lesion_count,
            })
        })
        .collect()
}
