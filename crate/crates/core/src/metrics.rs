//! Grounding metrics and the token-level diagnostics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoder::{binarize, ground, DEFAULT_THETA};
use crate::error::{DapError, Result};
use crate::math;
use crate::model::{cosine_sim, patch_norm_map, Model, TokenBundle};
use crate::prompting::PromptLayers;
use crate::relevance::PromptMap;
use crate::synth::{Mask, Sample};
use crate::tensor::Tensor;

/// Variance guard in the CNR denominator.
pub const CNR_EPS_VAR: f64 = 1e-8;

pub fn cnr(map: &[f64], gt: &Mask) -> Result<f64> {
    cnr_with_eps(map, gt, CNR_EPS_VAR)
}

/// `(μ_FG − μ_BG) / sqrt(σ²_FG + σ²_BG + ε)` with population variances.
pub fn cnr_with_eps(map: &[f64], gt: &Mask, eps_var: f64) -> Result<f64> {
    if map.len() != gt.data.len() {
        return Err(DapError::Dimension {
            context: "cnr",
            expected: gt.data.len(),
            actual: map.len(),
        });
    }
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for (&v, on) in map.iter().zip(gt.bits()) {
        if on {
            fg.push(v);
        } else {
            bg.push(v);
        }
    }
    if fg.is_empty() || bg.is_empty() {
        return Err(DapError::MaskCoverage);
    }
    let (mf, sf) = math::mean_std(&fg);
    let (mb, sb) = math::mean_std(&bg);
    let denom = math::sqrt(sf * sf + sb * sb + eps_var);
    let diff = mf - mb;
    if diff == 0.0 {
        return Ok(0.0);
    }
    Ok(diff / denom)
}

/// Whether the first maximum in row-major order falls inside the mask.
pub fn pointing_game(map: &[f64], gt: &Mask) -> bool {
    let mut best = 0;
    for (i, &v) in map.iter().enumerate() {
        if v > map[best] {
            best = i;
        }
    }
    gt.data.get(best).is_some_and(|&b| b != 0)
}

fn overlap(pred: &Mask, gt: &Mask) -> (usize, usize, usize) {
    let mut inter = 0;
    let (mut p, mut g) = (0, 0);
    for (a, b) in pred.bits().zip(gt.bits()) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    (inter, p, g)
}

/// `2|P∩G| / (|P| + |G|)`, and 1 for two empty masks.
pub fn dice(pred: &Mask, gt: &Mask) -> f64 {
    let (inter, p, g) = overlap(pred, gt);
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// `|P∩G| / |P∪G|`, and 1 for two empty masks.
pub fn iou(pred: &Mask, gt: &Mask) -> f64 {
    let (inter, p, g) = overlap(pred, gt);
    let union = p + g - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Patches with at least half of their pixels in the mask.
pub fn patch_foreground(mask: &Mask, patch: usize) -> Vec<bool> {
    let rows = mask.height / patch;
    let cols = mask.width / patch;
    let mut counts = vec![0usize; rows * cols];
    for y in 0..rows * patch {
        for x in 0..cols * patch {
            if mask.get(y, x) {
                counts[(y / patch) * cols + x / patch] += 1;
            }
        }
    }
    counts.into_iter().map(|c| 2 * c >= patch * patch).collect()
}

/// Nearest-neighbour upsampling of a patch grid to `height × width`.
pub fn upsample_grid(grid: &Tensor, height: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let r = y * grid.rows() / height;
        for x in 0..width {
            out.push(grid.get(r, x * grid.cols() / width));
        }
    }
    out
}

/// `value ≥ median` per entry.
pub fn median_binarize(values: &[f64], height: usize, width: usize) -> Mask {
    let m = math::median(values);
    let bits: Vec<bool> = values.iter().map(|&v| v >= m).collect();
    Mask::from_bools(height, width, &bits)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormOverlap {
    pub dice_norm_vs_bg: f64,
    pub dice_vg_vs_norm: f64,
    pub dice_vg_vs_gt: f64,
}

/// The three overlap scores for one image given its pixel-resolution norm
/// map, binarized grounding prediction and ground truth.
pub fn norm_overlap_from_maps(norm_pixels: &[f64], vg: &Mask, gt: &Mask) -> NormOverlap {
    let norm_mask = median_binarize(norm_pixels, gt.height, gt.width);
    NormOverlap {
        dice_norm_vs_bg: dice(&norm_mask, &gt.complement()),
        dice_vg_vs_norm: dice(vg, &norm_mask),
        dice_vg_vs_gt: dice(vg, gt),
    }
}

/// Dataset means of the norm-map overlap scores, using unprompted encodings
/// and decoder outputs binarized at `theta`.
pub fn norm_overlap_analysis(model: &Model, samples: &[Sample], theta: f64) -> Result<NormOverlap> {
    let layers = PromptLayers::last(model.config().vision.depth);
    let mut acc = NormOverlap::default();
    for s in samples {
        let bundle = model.encode_image(&s.image, None, &layers)?;
        let cls = model.encode_text(&s.text_tokens)?.cls_token;
        let vg = binarize(&ground(model, &bundle, &cls)?, theta);
        let gt = s.gt_mask();
        let norm = upsample_grid(&patch_norm_map(&bundle), gt.height, gt.width);
        let o = norm_overlap_from_maps(&norm, &vg, &gt);
        acc.dice_norm_vs_bg += o.dice_norm_vs_bg;
        acc.dice_vg_vs_norm += o.dice_vg_vs_norm;
        acc.dice_vg_vs_gt += o.dice_vg_vs_gt;
    }
    let n = samples.len().max(1) as f64;
    Ok(NormOverlap {
        dice_norm_vs_bg: acc.dice_norm_vs_bg / n,
        dice_vg_vs_norm: acc.dice_vg_vs_norm / n,
        dice_vg_vs_gt: acc.dice_vg_vs_gt / n,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = math::mean_std(values);
        Self { mean, std }
    }
}

/// Raw cosine populations gathered over a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CosinePopulations {
    pub img_fg: Vec<f64>,
    pub img_bg: Vec<f64>,
    pub cls_fg: Vec<f64>,
    pub cls_bg: Vec<f64>,
}

impl CosinePopulations {
    /// Add one image's patch cosines to the pools.
    pub fn push(&mut self, bundle: &TokenBundle, cls: &[f64], patch_fg: &[bool]) -> Result<()> {
        if patch_fg.len() != bundle.num_patches() {
            return Err(DapError::Dimension {
                context: "patch foreground flags",
                expected: bundle.num_patches(),
                actual: patch_fg.len(),
            });
        }
        for (i, &fg) in patch_fg.iter().enumerate() {
            let v = bundle.patch_tokens.row(i);
            let ci = cosine_sim(&bundle.img_token, v)?;
            let ct = cosine_sim(cls, v)?;
            if fg {
                self.img_fg.push(ci);
                self.cls_fg.push(ct);
            } else {
                self.img_bg.push(ci);
                self.cls_bg.push(ct);
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> Result<AlignmentStats> {
        if self.img_fg.is_empty() {
            return Err(DapError::NoForegroundPatches);
        }
        Ok(AlignmentStats {
            cos_img_fg: MeanStd::of(&self.img_fg),
            cos_img_bg: MeanStd::of(&self.img_bg),
            cos_cls_fg: MeanStd::of(&self.cls_fg),
            cos_cls_bg: MeanStd::of(&self.cls_bg),
            fg_patches: self.img_fg.len(),
            bg_patches: self.img_bg.len(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub cos_img_fg: MeanStd,
    pub cos_img_bg: MeanStd,
    pub cos_cls_fg: MeanStd,
    pub cos_cls_bg: MeanStd,
    pub fg_patches: usize,
    pub bg_patches: usize,
}

impl AlignmentStats {
    /// `mean cos([IMG], FG) − mean cos([IMG], BG)`
    pub fn img_gap(&self) -> f64 {
        self.cos_img_fg.mean - self.cos_img_bg.mean
    }
}

/// Cosine populations over a dataset. With `prompts`, every image is
/// encoded with its prompt at `layers`; otherwise unprompted.
pub fn alignment_populations(
    model: &Model,
    samples: &[Sample],
    prompts: Option<&[PromptMap]>,
    layers: &PromptLayers,
) -> Result<CosinePopulations> {
    if let Some(p) = prompts {
        if p.len() != samples.len() {
            return Err(DapError::Dimension {
                context: "prompts per sample",
                expected: samples.len(),
                actual: p.len(),
            });
        }
    }
    let patch = model.config().vision.patch_size;
    let mut pops = CosinePopulations::default();
    for (i, s) in samples.iter().enumerate() {
        let prompt = prompts.map(|p| &p[i]);
        let bundle = model.encode_image(&s.image, prompt, layers)?;
        let cls = model.encode_text(&s.text_tokens)?.cls_token;
        pops.push(&bundle, &cls, &patch_foreground(&s.gt_mask(), patch))?;
    }
    Ok(pops)
}

pub fn alignment_stats(
    model: &Model,
    samples: &[Sample],
    prompts: Option<&[PromptMap]>,
    layers: &PromptLayers,
) -> Result<AlignmentStats> {
    alignment_populations(model, samples, prompts, layers)?.summary()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub label: String,
    /// Inclusive range of the stratifying variable.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub dice: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    pub by_area: Vec<Stratum>,
    pub by_lesion_count: Vec<Stratum>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Mean Dice per lesion-area quintile (by rank) and per lesion count.
/// Fewer than five distinct areas collapse to that many groups.
pub fn stratify(areas: &[usize], counts: &[usize], dice: &[f64]) -> Strata {
    let n = areas.len();
    let mut strata = Strata::default();
    if n == 0 {
        return strata;
    }
    let mut distinct: Vec<usize> = areas.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let groups = distinct.len().min(5);
    if groups < 5 {
        strata.warning = Some(format!("only {} distinct lesion areas; using {groups} area groups", distinct.len()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (areas[i], i));
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); groups];
    if groups == distinct.len() {
        for &i in &order {
            let g = distinct.binary_search(&areas[i]).expect("present");
            bins[g].push(i);
        }
    } else {
        for (rank, &i) in order.iter().enumerate() {
            bins[rank * groups / n].push(i);
        }
    }
    strata.by_area = bins
        .iter()
        .enumerate()
        .map(|(g, idx)| stratum(format!("Q{}", g + 1), idx, areas, dice))
        .collect();
    let mut lesion_counts: Vec<usize> = counts.to_vec();
    lesion_counts.sort_unstable();
    lesion_counts.dedup();
    strata.by_lesion_count = lesion_counts
        .iter()
        .map(|&c| {
            let idx: Vec<usize> = (0..n).filter(|&i| counts[i] == c).collect();
            stratum(format!("{c} lesion(s)"), &idx, counts, dice)
        })
        .collect();
    strata
}

fn stratum(label: String, idx: &[usize], key: &[usize], dice: &[f64]) -> Stratum {
    let vals: Vec<f64> = idx.iter().map(|&i| dice[i]).collect();
    Stratum {
        label,
        lo: idx.iter().map(|&i| key[i]).min().unwrap_or(0) as f64,
        hi: idx.iter().map(|&i| key[i]).max().unwrap_or(0) as f64,
        count: idx.len(),
        dice: math::mean_std(&vals).0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: usize,
    pub cnr: f64,
    pub pg_hit: bool,
    pub dice: f64,
    pub iou: f64,
    pub lesion_area: usize,
    pub lesion_count: usize,
}

impl SampleMetrics {
    /// Scores for one continuous map against ground truth; `theta`
    /// binarizes the map for Dice and IoU.
    pub fn score(sample: &Sample, map: &[f64], theta: f64) -> Result<Self> {
        let gt = sample.gt_mask();
        let bits: Vec<bool> = map.iter().map(|&v| v > theta).collect();
        let pred = Mask::from_bools(gt.height, gt.width, &bits);
        Ok(Self {
            id: sample.id,
            cnr: cnr(map, &gt)?,
            pg_hit: pointing_game(map, &gt),
            dice: dice(&pred, &gt),
            iou: iou(&pred, &gt),
            lesion_area: sample.lesion_area,
            lesion_count: sample.lesion_count,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsBlock {
    pub dice_norm_vs_bg: f64,
    pub dice_vg_vs_norm: f64,
    pub dice_vg_vs_gt: f64,
    pub cos_img_fg_mean: f64,
    pub cos_img_fg_std: f64,
    pub cos_img_bg_mean: f64,
    pub cos_img_bg_std: f64,
    pub cos_cls_fg_mean: f64,
    pub cos_cls_fg_std: f64,
    pub cos_cls_bg_mean: f64,
    pub cos_cls_bg_std: f64,
    pub strata: Strata,
}

impl DiagnosticsBlock {
    pub fn new(overlap: NormOverlap, align: &AlignmentStats, strata: Strata) -> Self {
        Self {
            dice_norm_vs_bg: overlap.dice_norm_vs_bg,
            dice_vg_vs_norm: overlap.dice_vg_vs_norm,
            dice_vg_vs_gt: overlap.dice_vg_vs_gt,
            cos_img_fg_mean: align.cos_img_fg.mean,
            cos_img_fg_std: align.cos_img_fg.std,
            cos_img_bg_mean: align.cos_img_bg.mean,
            cos_img_bg_std: align.cos_img_bg.std,
            cos_cls_fg_mean: align.cos_cls_fg.mean,
            cos_cls_fg_std: align.cos_cls_fg.std,
            cos_cls_bg_mean: align.cos_cls_bg.mean,
            cos_cls_bg_std: align.cos_cls_bg.std,
            strata,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cnr: f64,
    pub pg: f64,
    pub dice: f64,
    pub iou: f64,
    pub per_sample: Vec<SampleMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticsBlock>,
}

impl MetricsReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> Self {
        let n = per_sample.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        Self {
            cnr: mean(|s| s.cnr),
            pg: mean(|s| s.pg_hit as u8 as f64),
            dice: mean(|s| s.dice),
            iou: mean(|s| s.iou),
            per_sample,
            diagnostics: None,
        }
    }

    pub fn median_dice(&self) -> f64 {
        let d: Vec<f64> = self.per_sample.iter().map(|s| s.dice).collect();
        math::median(&d)
    }
}

/// Default threshold for binarizing grounding maps in reports.
pub const DEFAULT_EVAL_THETA: f64 = DEFAULT_THETA;

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[usize]) -> Mask {
        let mut bits = vec![false; h * w];
        on.iter().for_each(|&i| bits[i] = true);
        Mask::from_bools(h, w, &bits)
    }

    #[test]
    fn cnr_fixtures() {
        let gt = mask(2, 2, &[0, 1]);
        let v = cnr_with_eps(&[2.0, 4.0, 0.0, 2.0], &gt, 0.0).unwrap();
        assert!((v - 2.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(cnr(&[3.0; 4], &gt).unwrap(), 0.0);
        let neg = cnr(&[-2.0, -4.0, 0.0, -2.0], &gt).unwrap();
        assert!((neg + cnr(&[2.0, 4.0, 0.0, 2.0], &gt).unwrap()).abs() < 1e-12);
        assert_eq!(cnr(&[1.0; 4], &mask(2, 2, &[0, 1, 2, 3])), Err(DapError::MaskCoverage));
        assert_eq!(cnr(&[1.0; 4], &mask(2, 2, &[])), Err(DapError::MaskCoverage));
    }

    #[test]
    fn pointing_fixtures() {
        let gt = mask(2, 2, &[3]);
        assert!(pointing_game(&[0.0, 0.1, 0.2, 0.9], &gt));
        assert!(!pointing_game(&[0.0, 0.95, 0.2, 0.9], &gt));
        assert!(!pointing_game(&[0.5; 4], &gt));
        assert!(pointing_game(&[0.5; 4], &mask(2, 2, &[0])));
    }

    #[test]
    fn dice_iou_fixtures() {
        let a = mask(2, 4, &[0, 1, 2]);
        assert_eq!((dice(&a, &a), iou(&a, &a)), (1.0, 1.0));
        let b = mask(2, 4, &[5, 6]);
        assert_eq!((dice(&a, &b), iou(&a, &b)), (0.0, 0.0));
        let g = mask(2, 4, &[0, 1, 2, 3]);
        let p = mask(2, 4, &[0, 1]);
        assert!((dice(&p, &g) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&p, &g), 0.5);
        let e = mask(2, 2, &[]);
        assert_eq!((dice(&e, &e), iou(&e, &e)), (1.0, 1.0));
    }

    #[test]
    fn patch_fg_counts_half_covered_patches() {
        let mut m = Mask::zeros(4, 4);
        m.set(0, 0, true);
        m.set(0, 1, true);
        m.set(3, 3, true);
        assert_eq!(patch_foreground(&m, 2), vec![true, false, false, false]);
    }

    #[test]
    fn norm_overlap_conventions() {
        let gt = mask(2, 2, &[0, 1]);
        let constant = norm_overlap_from_maps(&[2.0; 4], &gt, &gt);
        assert_eq!(constant.dice_norm_vs_bg, dice(&mask(2, 2, &[0, 1, 2, 3]), &gt.complement()));
        let oracle = norm_overlap_from_maps(&[1.0, 1.0, 0.0, 0.0], &mask(2, 2, &[1, 3]), &gt);
        assert_eq!(oracle.dice_vg_vs_gt, oracle.dice_vg_vs_norm);
        assert_eq!(oracle.dice_norm_vs_bg, 0.0);
    }

    #[test]
    fn strata_rules() {
        let s = stratify(&[50; 10], &[1; 10], &[0.5; 10]);
        assert_eq!(s.by_area.len(), 1);
        assert!(s.warning.is_some());
        let areas: Vec<usize> = (0..100).map(|i| 40 + 3 * i).collect();
        let counts: Vec<usize> = (0..100).map(|i| 1 + i % 3).collect();
        let d: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let s = stratify(&areas, &counts, &d);
        assert_eq!(s.by_area.iter().map(|x| x.count).collect::<Vec<_>>(), vec![20; 5]);
        assert_eq!(s.by_lesion_count.len(), 3);
        assert!(s.by_area.iter().all(|x| (0.0..=1.0).contains(&x.dice)));
    }

    #[test]
    fn identical_tokens_give_unit_alignment() {
        let bundle = TokenBundle {
            img_token: vec![1.0, 2.0],
            patch_tokens: Tensor::from_vec(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap(),
            grid_shape: (1, 3),
            layer_trace: None,
        };
        let mut pops = CosinePopulations::default();
        pops.push(&bundle, &[1.0, 2.0], &[true, false, false]).unwrap();
        let s = pops.summary().unwrap();
        assert!((s.cos_img_fg.mean - 1.0).abs() < 1e-12 && s.cos_img_bg.std < 1e-12);
        assert_eq!(s.fg_patches, 1);
        assert_eq!(CosinePopulations::default().summary(), Err(DapError::NoForegroundPatches));
    }
}
