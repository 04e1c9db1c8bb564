//! Pixel decoder: text-conditioned cross-attention over patch tokens followed
//! by two non-overlapping transposed-convolution stages.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{DapError, Result};
use crate::math;
use crate::model::{Linear, Model, Norm, TokenBundle};
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::synth::Mask;
use crate::tensor::Tensor;

/// Default binarization threshold for grounding maps.
pub const DEFAULT_THETA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub hidden_channels: usize,
    /// Upsampling factor of the first stage; the second stage covers the
    /// rest of the patch.
    pub first_stride: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 16,
            first_stride: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.hidden_channels == 0 {
            return Err(DapError::Config("decoder.hidden_channels must be >= 1".to_string()));
        }
        if self.first_stride == 0 || patch_size % self.first_stride != 0 {
            return Err(DapError::Config(format!(
                "decoder.first_stride must divide the patch size {patch_size}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    ln_q: Norm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    null_token: ParamId,
    ln_up: Norm,
    up1: Linear,
    up2: Linear,
    s1: usize,
    s2: usize,
    hidden: usize,
}

impl Decoder {
    pub(crate) fn new(pb: &mut ParamBuilder, config: &DecoderConfig, embed_dim: usize, patch_size: usize) -> Self {
        let s1 = config.first_stride.max(1);
        let s2 = (patch_size / s1).max(1);
        let h = config.hidden_channels;
        Self {
            ln_q: Norm::new(pb, "decoder.ln_q", embed_dim),
            wq: Linear::new(pb, "decoder.wq", embed_dim, embed_dim, false),
            wk: Linear::new(pb, "decoder.wk", embed_dim, embed_dim, false),
            wv: Linear::new(pb, "decoder.wv", embed_dim, embed_dim, false),
            wo: Linear::new(pb, "decoder.wo", embed_dim, embed_dim, true),
            null_token: pb.add("decoder.null_token".to_string(), 1, embed_dim, Init::Normal(0.5)),
            ln_up: Norm::new(pb, "decoder.ln_up", embed_dim),
            up1: Linear::new(pb, "decoder.up1", embed_dim, s1 * s1 * h, true),
            up2: Linear::new(pb, "decoder.up2", h, s2 * s2, true),
            s1,
            s2,
            hidden: h,
        }
    }

    /// Pixel scores (`H × W`, in (0, 1)) from patch tokens (`n × e`) and the
    /// text [CLS] (`1 × e`).
    pub fn forward(&self, g: &mut Graph, p: &Bound, patches: Var, cls: Var) -> Var {
        let n = g.value(patches).rows();
        let e = g.value(patches).cols();
        let side = math::round(math::sqrt(n as f64)) as usize;
        debug_assert_eq!(side * side, n, "decoder expects a square patch grid");

        let q = self.ln_q.forward(g, p, patches);
        let q = self.wq.forward(g, p, q);
        let kv_in = g.concat_rows(&[cls, p.var(self.null_token)]);
        let k = self.wk.forward(g, p, kv_in);
        let v = self.wv.forward(g, p, kv_in);
        let scores = g.matmul_t(q, k);
        let scores = g.scale(scores, 1.0 / math::sqrt(e as f64));
        let a = g.softmax(scores);
        let fused = g.matmul(a, v);
        let fused = self.wo.forward(g, p, fused);
        let x = g.add(patches, fused);
        let x = self.ln_up.forward(g, p, x);

        // n × (s1²·h) has the same row-major layout as (n·s1²) × h.
        let up = self.up1.forward(g, p, x);
        let up = g.gelu(up);
        let sub = n * self.s1 * self.s1;
        let index = (0..sub * self.hidden).collect();
        let up = g.gather(up, index, sub, self.hidden);
        let px = self.up2.forward(g, p, up);

        let patch = self.s1 * self.s2;
        let size = side * patch;
        let mut index = Vec::with_capacity(size * size);
        for y in 0..size {
            let (r, py) = (y / patch, y % patch);
            let (dy, ey) = (py / self.s2, py % self.s2);
            for x in 0..size {
                let (c, qx) = (x / patch, x % patch);
                let (dx, ex) = (qx / self.s2, qx % self.s2);
                let row = (r * side + c) * self.s1 * self.s1 + dy * self.s1 + dx;
                index.push(row * self.s2 * self.s2 + ey * self.s2 + ex);
            }
        }
        let logits = g.gather(px, index, size, size);
        g.sigmoid(logits)
    }
}

/// Dense grounding scores plus their per-patch means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingMap {
    pub scores: Tensor,
    pub patch_scores: Tensor,
}

impl GroundingMap {
    pub fn from_scores(scores: Tensor, patch_size: usize) -> Self {
        let rows = scores.rows() / patch_size;
        let cols = scores.cols() / patch_size;
        let mut patch_scores = Tensor::zeros(rows, cols);
        let area = (patch_size * patch_size) as f64;
        for y in 0..scores.rows() {
            for x in 0..scores.cols() {
                let (r, c) = (y / patch_size, x / patch_size);
                let v = patch_scores.get(r, c) + scores.get(y, x) / area;
                patch_scores.set(r, c, v);
            }
        }
        Self { scores, patch_scores }
    }

    pub fn height(&self) -> usize {
        self.scores.rows()
    }

    pub fn width(&self) -> usize {
        self.scores.cols()
    }
}

/// Decoder output for an encoded image and a text embedding.
pub fn ground(model: &Model, bundle: &TokenBundle, cls: &[f64]) -> Result<GroundingMap> {
    let e = model.config().embed_dim;
    if bundle.patch_tokens.cols() != e || cls.len() != e {
        return Err(DapError::Dimension {
            context: "decoder width",
            expected: e,
            actual: if cls.len() != e { cls.len() } else { bundle.patch_tokens.cols() },
        });
    }
    if bundle.patch_tokens.rows() != model.config().vision.num_patches() {
        return Err(DapError::Dimension {
            context: "decoder patch count",
            expected: model.config().vision.num_patches(),
            actual: bundle.patch_tokens.rows(),
        });
    }
    let mut g = Graph::new();
    let p = model.params.bind_constants(&mut g);
    let v = g.constant(bundle.patch_tokens.clone());
    let c = g.constant(Tensor::row_vector(cls.to_vec()));
    let out = model.decoder.forward(&mut g, &p, v, c);
    Ok(GroundingMap::from_scores(
        g.value(out).clone(),
        model.config().vision.patch_size,
    ))
}

/// `score > θ` per pixel.
pub fn binarize(map: &GroundingMap, theta: f64) -> Mask {
    binarize_scores(&map.scores, theta)
}

pub fn binarize_scores(scores: &Tensor, theta: f64) -> Mask {
    let bits: Vec<bool> = scores.data().iter().map(|&v| v > theta).collect();
    Mask::from_bools(scores.rows(), scores.cols(), &bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_config;
    use crate::prompting::PromptLayers;
    use crate::synth::{generate_dataset, SynthConfig};
    use alloc::vec;

    fn setup() -> (Model, TokenBundle) {
        let model = Model::new(tiny_config(8, 1, 4)).unwrap();
        let cfg = SynthConfig {
            image_size: 16,
            patch_size: 4,
            lesion_area_fraction: (0.05, 0.2),
            lesions_per_image: (1, 1),
            ..Default::default()
        };
        let img = generate_dataset(&cfg, 1).unwrap().remove(0).image;
        let bundle = model.encode_image(&img, None, &PromptLayers::last(1)).unwrap();
        (model, bundle)
    }

    #[test]
    fn shape_range_determinism() {
        let (model, bundle) = setup();
        let cls = model.encode_text(&[2, 3]).unwrap().cls_token;
        let a = ground(&model, &bundle, &cls).unwrap();
        assert_eq!(a.scores.shape(), (16, 16));
        assert_eq!(a.patch_scores.shape(), (4, 4));
        assert!(a.scores.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a, ground(&model, &bundle, &cls).unwrap());
    }

    #[test]
    fn zero_text_gives_text_independent_map() {
        let (model, bundle) = setup();
        let zero = vec![0.0; 8];
        let a = ground(&model, &bundle, &zero).unwrap();
        let cls = model.encode_text(&[2, 3]).unwrap().cls_token;
        let b = ground(&model, &bundle, &cls).unwrap();
        assert_ne!(a, b);
        // A zero [CLS] has zero key and value, so any two zero texts agree.
        let mut g = Graph::new();
        let p = model.params.bind_constants(&mut g);
        let v = g.constant(bundle.patch_tokens.clone());
        let c = g.constant(Tensor::zeros(1, 8));
        let out = model.decoder.forward(&mut g, &p, v, c);
        assert_eq!(g.value(out), &a.scores);
    }

    #[test]
    fn width_mismatch() {
        let (model, bundle) = setup();
        assert!(matches!(ground(&model, &bundle, &[1.0; 5]), Err(DapError::Dimension { .. })));
    }

    #[test]
    fn binarize_fixtures() {
        let m = GroundingMap::from_scores(Tensor::filled(4, 4, 0.6), 2);
        assert_eq!(binarize(&m, 0.5).count(), 16);
        let m = GroundingMap::from_scores(Tensor::filled(4, 4, 0.4), 2);
        assert_eq!(binarize(&m, 0.5).count(), 0);
    }
}
