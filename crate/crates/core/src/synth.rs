//! Synthetic grounding benchmark: small textured lesions on a canonical,
//! anatomy-like background, each image paired with a templated description
//! of the lesion class it contains.
//!
//! Every sample is rendered from its own ChaCha stream (`seed`, sample index),
//! so datasets are reproducible and samples can be rendered independently.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DapError, Result};
use crate::math;

/// Maximum text length in tokens.
pub const MAX_TEXT_LEN: usize = 77;

/// Token id reserved for padding.
pub const PAD_TOKEN: u32 = 0;
/// Token id reserved for words outside the vocabulary.
pub const UNK_TOKEN: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Inclusive range of lesions per image.
    pub lesions_per_image: (usize, usize),
    /// Inclusive range of total lesion area as a fraction of the image.
    pub lesion_area_fraction: (f64, f64),
    pub templates_per_class: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise_level: f64,
    /// Mean intensity offset of lesion texture over the local background.
    pub lesion_contrast: f64,
    /// Amplitude of the class texture wave inside lesions.
    pub texture_amplitude: f64,
    /// Lower bound the lesion offset must respect.
    pub contrast_floor: f64,
    /// Pixels kept free of lesion at the image border.
    pub border_margin: usize,
    /// Placement attempts per lesion before the layout is redrawn.
    pub max_placement_attempts: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            channels: 1,
            num_classes: 4,
            lesions_per_image: (1, 3),
            lesion_area_fraction: (0.01, 0.10),
            templates_per_class: 10,
            noise_level: 0.03,
            lesion_contrast: 0.22,
            texture_amplitude: 0.3,
            contrast_floor: 0.1,
            border_margin: 1,
            max_placement_attempts: 200,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(DapError::Config(msg.to_string()));
        if self.patch_size == 0 || self.image_size == 0 {
            return fail("image_size and patch_size must be positive");
        }
        if self.image_size % self.patch_size != 0 {
            return fail("image_size must be divisible by patch_size");
        }
        if self.channels == 0 {
            return fail("channels must be at least 1");
        }
        if self.num_classes == 0 {
            return fail("num_classes must be at least 1");
        }
        let (lo, hi) = self.lesions_per_image;
        if lo == 0 || lo > hi {
            return fail("lesions_per_image must be a non-empty range starting at 1 or more");
        }
        let (fmin, fmax) = self.lesion_area_fraction;
        if !(fmin > 0.0) {
            return fail("lesion_area_fraction min must be > 0");
        }
        if !(fmax < 0.5) {
            return fail("lesion_area_fraction max must be < 0.5");
        }
        if fmin > fmax {
            return fail("lesion_area_fraction min must not exceed max");
        }
        if self.templates_per_class == 0 {
            return fail("templates_per_class must be >= 1");
        }
        if self.templates_per_class > TemplateBank::capacity() {
            return fail("templates_per_class exceeds the template generator capacity");
        }
        if !(self.noise_level >= 0.0) {
            return fail("noise_level must be >= 0");
        }
        if !(self.lesion_contrast >= self.contrast_floor) || !(self.contrast_floor >= 0.0) {
            return fail("lesion_contrast must be >= contrast_floor >= 0");
        }
        if !(self.texture_amplitude >= 0.0) {
            return fail("texture_amplitude must be >= 0");
        }
        if self.max_placement_attempts == 0 {
            return fail("max_placement_attempts must be positive");
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn num_pixels(&self) -> usize {
        self.image_size * self.image_size
    }
}

/// `channels × height × width` image, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Binary `height × width` mask stored as 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_bools(height: usize, width: usize, bits: &[bool]) -> Self {
        Self {
            height,
            width,
            data: bits.iter().map(|&b| u8::from(b)).collect(),
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.data.iter().map(|&v| v != 0)
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| u8::from(v == 0)).collect(),
        }
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| u8::from(a != 0 || b != 0)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub image: Image,
    pub text_tokens: Vec<u32>,
    /// Referenced classes, ascending.
    pub class_ids: Vec<usize>,
    /// One ground-truth mask per entry of `class_ids`.
    pub masks: Vec<Mask>,
    /// Total lesion pixel count.
    pub lesion_area: usize,
    pub lesion_count: usize,
}

impl Sample {
    /// Union of the per-class masks.
    pub fn gt_mask(&self) -> Mask {
        let mut it = self.masks.iter();
        let first = it.next().cloned().unwrap_or_else(|| Mask::zeros(self.image.height, self.image.width));
        it.fold(first, |acc, m| acc.union(m))
    }

    pub fn primary_class(&self) -> usize {
        self.class_ids[0]
    }
}

/// Whitespace tokenizer over a fixed word table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Self {
            words: vec!["<pad>".to_string(), "<unk>".to_string()],
            index: BTreeMap::new(),
        };
        for w in words {
            if !vocab.words.iter().any(|x| x == w) {
                vocab.words.push(w.to_string());
            }
        }
        vocab.rebuild_index();
        vocab
    }

    fn rebuild_index(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK_TOKEN))
            .collect()
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        let words: Vec<&str> = tokens
            .iter()
            .map(|&t| self.words.get(t as usize).map(String::as_str).unwrap_or("<unk>"))
            .collect();
        words.join(" ")
    }
}

const CLASS_WORDS: [(&str, &str); 8] = [
    ("striated", "linear"),
    ("banded", "columnar"),
    ("hatched", "oblique"),
    ("mottled", "crosswise"),
    ("reticular", "meshlike"),
    ("streaky", "fibrous"),
    ("layered", "laminar"),
    ("grainy", "stippled"),
];

const FRAMES: [&str; 10] = [
    "{a} opacity is seen",
    "there is a {a} lesion",
    "findings show {b} texture",
    "small {a} focus present",
    "evidence of {b} abnormality",
    "a {b} region is noted",
    "{a} and {b} pattern observed",
    "subtle {b} density",
    "focal {a} change",
    "the image shows a {a} {b} area",
];

const SEVERITY: [&str; 3] = ["", "mild ", "marked "];

/// Per-class description templates, tokenized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateBank {
    pub vocabulary: Vocabulary,
    pub texts: Vec<Vec<String>>,
    pub tokens: Vec<Vec<Vec<u32>>>,
}

impl TemplateBank {
    /// Number of distinct templates the generator can produce per class.
    pub const fn capacity() -> usize {
        FRAMES.len() * 2 * SEVERITY.len()
    }

    /// Deterministic bank of `per_class` templates for each class.
    pub fn build(num_classes: usize, per_class: usize) -> Self {
        let texts: Vec<Vec<String>> = (0..num_classes)
            .map(|c| (0..per_class).map(|t| template_text(c, t)).collect())
            .collect();
        Self::from_texts(texts)
    }

    pub fn from_texts(texts: Vec<Vec<String>>) -> Self {
        let vocabulary = Vocabulary::from_words(texts.iter().flatten().flat_map(|t| t.split_whitespace()));
        let tokens = texts
            .iter()
            .map(|class| class.iter().map(|t| vocabulary.encode(t)).collect())
            .collect();
        Self {
            vocabulary,
            texts,
            tokens,
        }
    }

    pub fn for_config(config: &SynthConfig) -> Self {
        Self::build(config.num_classes, config.templates_per_class)
    }

    pub fn num_classes(&self) -> usize {
        self.tokens.len()
    }

    /// Restore the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.vocabulary.rebuild_index();
    }
}

fn class_words(c: usize) -> (String, String) {
    match CLASS_WORDS.get(c) {
        Some(&(a, b)) => (a.to_string(), b.to_string()),
        None => (format!("type{c}"), format!("variant{c}")),
    }
}

fn template_text(class_id: usize, t: usize) -> String {
    let (a, b) = class_words(class_id);
    let frame = FRAMES[t % FRAMES.len()];
    let swapped = (t / FRAMES.len()) % 2 == 1;
    let severity = SEVERITY[(t / (2 * FRAMES.len())) % SEVERITY.len()];
    let (a, b) = if swapped { (b, a) } else { (a, b) };
    let body = frame.replace("{a}", &a).replace("{b}", &b);
    format!("{severity}{body}")
}

/// Draw one description of `class_id` uniformly from the bank.
pub fn make_text<R: Rng + ?Sized>(class_id: usize, rng: &mut R, bank: &TemplateBank) -> Result<Vec<u32>> {
    let class = bank.tokens.get(class_id).ok_or(DapError::UnknownClass {
        class_id,
        num_classes: bank.num_classes(),
    })?;
    if class.is_empty() {
        return Err(DapError::EmptyBank(class_id));
    }
    let pick = rng.gen_range(0..class.len());
    Ok(class[pick].clone())
}

/// Per-sample random stream: stream `index` of the ChaCha generator keyed by `seed`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Render `n` samples. Sample `i` depends only on `(config, i)`.
pub fn generate_dataset(config: &SynthConfig, n: usize) -> Result<Vec<Sample>> {
    generate_range(config, 0..n)
}

/// Render the samples with ids in `ids`; disjoint ranges give disjoint splits
/// of the same stream.
pub fn generate_range(config: &SynthConfig, ids: core::ops::Range<usize>) -> Result<Vec<Sample>> {
    config.validate()?;
    let bank = TemplateBank::for_config(config);
    ids
        .map(|i| {
            let mut rng = sample_rng(config.seed, i);
            let mut s = render_sample(&mut rng, config, &bank)?;
            s.id = i;
            Ok(s)
        })
        .collect()
}

/// Index ranges of consecutive train/val/test splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: core::ops::Range<usize>,
    pub val: core::ops::Range<usize>,
    pub test: core::ops::Range<usize>,
}

pub fn split_by_index(n: usize, train: usize, val: usize) -> Splits {
    let train_end = train.min(n);
    let val_end = (train_end + val).min(n);
    Splits {
        train: 0..train_end,
        val: train_end..val_end,
        test: val_end..n,
    }
}

/// Texture orientation and period of a lesion class.
fn class_texture(class_id: usize, num_classes: usize) -> (f64, f64) {
    let theta = PI * class_id as f64 / num_classes as f64;
    let period = 3.0 + (class_id % 3) as f64;
    (theta, period)
}

/// Canonical background: two darker fields, a bright central band and
/// faint horizontal ribbing, with a small per-sample shift and gain.
fn background_value(x: f64, y: f64, size: f64, shift: (f64, f64), gain: f64) -> f64 {
    let u = (x - shift.0) / size;
    let v = (y - shift.1) / size;
    let field = |cx: f64| {
        let dx = (u - cx) / 0.17;
        let dy = (v - 0.52) / 0.34;
        math::exp(-0.5 * (dx * dx + dy * dy) * (dx * dx + dy * dy))
    };
    let fields = field(0.3) + field(0.7);
    let band = math::exp(-0.5 * ((u - 0.5) / 0.05) * ((u - 0.5) / 0.05));
    let ribs = 0.04 * math::sin(2.0 * PI * v * 5.0);
    let base = 0.55 - 0.22 * fields + 0.15 * band + ribs * fields;
    (gain * base).clamp(0.05, 0.75)
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 - self.cx) / self.rx;
        let dy = (y as f64 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Rendered sample plus the lesion-free background it was drawn on.
pub(crate) struct Rendered {
    pub sample: Sample,
    #[cfg_attr(not(test), allow(dead_code))]
    pub background: Vec<f64>,
}

/// Render one sample from `rng`.
pub fn render_sample<R: Rng + ?Sized>(rng: &mut R, config: &SynthConfig, bank: &TemplateBank) -> Result<Sample> {
    render_layers(rng, config, bank).map(|r| r.sample)
}

pub(crate) fn render_layers<R: Rng + ?Sized>(
    rng: &mut R,
    config: &SynthConfig,
    bank: &TemplateBank,
) -> Result<Rendered> {
    let size = config.image_size;
    let class_id = rng.gen_range(0..config.num_classes);
    let text_tokens = make_text(class_id, rng, bank)?;
    let lesion_count = rng.gen_range(config.lesions_per_image.0..=config.lesions_per_image.1);
    let mask = place_lesions(rng, config, lesion_count)?;

    let shift = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    let gain = rng.gen_range(0.95..1.05);
    let (theta, period) = class_texture(class_id, config.num_classes);
    let (ct, st) = (math::cos(theta), math::sin(theta));
    let phase = rng.gen_range(0.0..2.0 * PI);

    let mut background = vec![0.0; size * size];
    let mut image = Image::zeros(config.channels, size, size);
    for y in 0..size {
        for x in 0..size {
            let bg = background_value(x as f64, y as f64, size as f64, shift, gain);
            background[y * size + x] = bg;
            let clean = if mask.get(y, x) {
                let wave = math::sin(2.0 * PI * (x as f64 * ct + y as f64 * st) / period + phase);
                bg + config.lesion_contrast + config.texture_amplitude * wave
            } else {
                bg
            };
            for c in 0..config.channels {
                let noise: f64 = if config.noise_level > 0.0 {
                    config.noise_level * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                image.data[(c * size + y) * size + x] = (clean + noise).clamp(0.0, 1.0) as f32;
            }
        }
    }

    let lesion_area = mask.count();
    Ok(Rendered {
        sample: Sample {
            id: 0,
            image,
            text_tokens,
            class_ids: vec![class_id],
            masks: vec![mask],
            lesion_area,
            lesion_count,
        },
        background,
    })
}

/// Place `count` non-touching ellipses whose total rasterized area lies in
/// the configured range.
fn place_lesions<R: Rng + ?Sized>(rng: &mut R, config: &SynthConfig, count: usize) -> Result<Mask> {
    let size = config.image_size;
    let pixels = (size * size) as f64;
    let (fmin, fmax) = config.lesion_area_fraction;
    let min_area = math::ceil(fmin * pixels - 1e-9) as usize;
    let max_area = math::floor(fmax * pixels + 1e-9) as usize;
    let margin = config.border_margin as f64;

    const LAYOUT_RETRIES: usize = 64;
    for _ in 0..LAYOUT_RETRIES {
        let target = rng.gen_range(fmin..=fmax) * pixels;
        let weights: Vec<f64> = (0..count).map(|_| rng.gen_range(0.5..1.5)).collect();
        let wsum: f64 = weights.iter().sum();
        let mut occupied = Mask::zeros(size, size);
        let mut placed_all = true;
        for w in &weights {
            let area = target * w / wsum;
            let aspect = rng.gen_range(0.6..1.6);
            let ry = math::sqrt(area / (PI * aspect)).max(1.0);
            let rx = (aspect * ry).max(1.0);
            let lo_x = margin + rx;
            let hi_x = size as f64 - 1.0 - margin - rx;
            let lo_y = margin + ry;
            let hi_y = size as f64 - 1.0 - margin - ry;
            if lo_x > hi_x || lo_y > hi_y {
                placed_all = false;
                break;
            }
            let mut placed = false;
            for _ in 0..config.max_placement_attempts {
                let e = Ellipse {
                    cx: rng.gen_range(lo_x..=hi_x),
                    cy: rng.gen_range(lo_y..=hi_y),
                    rx,
                    ry,
                };
                if let Some(cells) = rasterize_free(&e, &occupied, config.border_margin) {
                    for (y, x) in cells {
                        occupied.set(y, x, true);
                    }
                    placed = true;
                    break;
                }
            }
            if !placed {
                placed_all = false;
                break;
            }
        }
        let area = occupied.count();
        if placed_all && area >= min_area.max(1) && area <= max_area {
            return Ok(occupied);
        }
    }
    Err(DapError::Generation(format!(
        "could not place {count} non-overlapping lesions within the area range after {LAYOUT_RETRIES} layouts"
    )))
}

/// Pixels covered by `e`, or `None` if any of them (or their 8-neighbours)
/// is already occupied or falls inside the border margin.
fn rasterize_free(e: &Ellipse, occupied: &Mask, margin: usize) -> Option<Vec<(usize, usize)>> {
    let size = occupied.width;
    let y0 = math::floor(e.cy - e.ry).max(0.0) as usize;
    let y1 = (math::floor(e.cy + e.ry) as usize + 1).min(size);
    let x0 = math::floor(e.cx - e.rx).max(0.0) as usize;
    let x1 = (math::floor(e.cx + e.rx) as usize + 1).min(size);
    let mut cells = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            if !e.contains(x, y) {
                continue;
            }
            if x < margin || y < margin || x + margin >= size || y + margin >= size {
                return None;
            }
            for ny in y.saturating_sub(1)..(y + 2).min(size) {
                for nx in x.saturating_sub(1)..(x + 2).min(size) {
                    if occupied.get(ny, nx) {
                        return None;
                    }
                }
            }
            cells.push((y, x));
        }
    }
    if cells.is_empty() {
        None
    } else {
        Some(cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dataset() {
        assert!(generate_dataset(&SynthConfig::default(), 0).unwrap().is_empty());
    }

    #[test]
    fn dataset_is_deterministic() {
        let cfg = SynthConfig {
            seed: 17,
            ..Default::default()
        };
        assert_eq!(generate_dataset(&cfg, 8).unwrap(), generate_dataset(&cfg, 8).unwrap());
    }

    #[test]
    fn lesion_areas_within_range_by_mask_count() {
        let cfg = SynthConfig::default();
        let data = generate_dataset(&cfg, 100).unwrap();
        for s in &data {
            // brute-force count straight off the mask pixels
            let mut count = 0usize;
            for y in 0..s.image.height {
                for x in 0..s.image.width {
                    if s.masks[0].data[y * s.image.width + x] == 1 {
                        count += 1;
                    }
                }
            }
            assert_eq!(count, s.lesion_area);
            assert!(count as f64 >= 0.01 * 4096.0 && count as f64 <= 0.10 * 4096.0, "area {count}");
            assert!(s.text_tokens.len() <= MAX_TEXT_LEN);
            assert!(s.masks.iter().all(|m| m.count() > 0));
        }
    }

    #[test]
    fn single_lesion_config_gives_one_lesion() {
        let cfg = SynthConfig {
            lesions_per_image: (1, 1),
            ..Default::default()
        };
        for s in generate_dataset(&cfg, 10).unwrap() {
            assert_eq!(s.lesion_count, 1);
        }
    }

    #[test]
    fn margin_keeps_lesions_off_the_border() {
        let cfg = SynthConfig {
            border_margin: 2,
            ..Default::default()
        };
        for s in generate_dataset(&cfg, 20).unwrap() {
            let m = &s.masks[0];
            for i in 0..m.width {
                for &(y, x) in &[(0, i), (m.height - 1, i), (i, 0), (i, m.width - 1)] {
                    assert!(!m.get(y, x));
                }
            }
        }
    }

    #[test]
    fn different_seeds_give_different_images() {
        let a = generate_dataset(&SynthConfig { seed: 1, ..Default::default() }, 1).unwrap();
        let b = generate_dataset(&SynthConfig { seed: 2, ..Default::default() }, 1).unwrap();
        assert_ne!(a[0].image.data, b[0].image.data);
    }

    #[test]
    fn invalid_configs_name_the_violated_invariant() {
        let cases = [
            (SynthConfig { image_size: 60, ..Default::default() }, "divisible"),
            (SynthConfig { lesion_area_fraction: (0.0, 0.1), ..Default::default() }, "min must be > 0"),
            (SynthConfig { lesion_area_fraction: (0.1, 0.5), ..Default::default() }, "max must be < 0.5"),
            (SynthConfig { templates_per_class: 0, ..Default::default() }, "templates_per_class"),
        ];
        for (cfg, needle) in cases {
            match generate_dataset(&cfg, 1) {
                Err(DapError::Config(msg)) => assert!(msg.contains(needle), "{msg}"),
                other => panic!("expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn impossible_layouts_fail_with_generation_error() {
        let cfg = SynthConfig {
            image_size: 16,
            patch_size: 4,
            lesions_per_image: (3, 3),
            lesion_area_fraction: (0.4, 0.45),
            max_placement_attempts: 5,
            ..Default::default()
        };
        assert!(matches!(generate_dataset(&cfg, 1), Err(DapError::Generation(_))));
    }

    #[test]
    fn single_template_is_always_chosen() {
        let bank = TemplateBank::build(2, 1);
        let mut rng = sample_rng(0, 0);
        let first = make_text(0, &mut rng, &bank).unwrap();
        for _ in 0..20 {
            assert_eq!(make_text(0, &mut rng, &bank).unwrap(), first);
        }
    }

    #[test]
    fn every_template_is_drawn() {
        let bank = TemplateBank::build(4, 10);
        let mut rng = sample_rng(3, 0);
        let mut seen = vec![0usize; 10];
        for _ in 0..1000 {
            let t = make_text(1, &mut rng, &bank).unwrap();
            let idx = bank.tokens[1].iter().position(|x| *x == t).unwrap();
            seen[idx] += 1;
        }
        assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
    }

    #[test]
    fn text_lookup_errors() {
        let bank = TemplateBank::build(2, 3);
        let mut rng = sample_rng(0, 0);
        assert!(matches!(make_text(5, &mut rng, &bank), Err(DapError::UnknownClass { .. })));
        let empty = TemplateBank::from_texts(vec![vec![], vec!["x".into()]]);
        assert_eq!(make_text(0, &mut rng, &empty), Err(DapError::EmptyBank(0)));
    }

    #[test]
    fn templates_are_distinct_up_to_capacity() {
        let bank = TemplateBank::build(3, TemplateBank::capacity());
        for class in &bank.texts {
            let mut sorted = class.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), class.len());
        }
        let unknown = bank.vocabulary.encode("nonsense word");
        assert_eq!(unknown, vec![UNK_TOKEN, UNK_TOKEN]);
    }

    #[test]
    fn area_quintiles_are_nonempty() {
        let data = generate_dataset(&SynthConfig::default(), 100).unwrap();
        let mut areas: Vec<usize> = data.iter().map(|s| s.lesion_area).collect();
        areas.sort_unstable();
        areas.dedup();
        assert!(areas.len() >= 5);
    }

    #[test]
    fn lesion_texture_is_brighter_than_background_by_the_floor() {
        let cfg = SynthConfig::default();
        let bank = TemplateBank::for_config(&cfg);
        for i in 0..30 {
            let mut rng = sample_rng(cfg.seed, i);
            let r = render_layers(&mut rng, &cfg, &bank).unwrap();
            let m = &r.sample.masks[0];
            let mut diff = 0.0;
            for (k, on) in m.bits().enumerate() {
                if on {
                    diff += r.sample.image.data[k] as f64 - r.background[k];
                }
            }
            let mean = diff / m.count() as f64;
            assert!(mean >= cfg.contrast_floor, "sample {i}: {mean}");
        }
    }
}
