//! Gradient-weighted attention relevance and the prompt maps built from it.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{DapError, Result};
use crate::model::Model;
use crate::params::Bound;
use crate::synth::Image;
use crate::tensor::Tensor;

/// Entries above this value count as important when corrupting a prompt.
pub const IMPORTANCE_THRESHOLD: f64 = 0.3;

static EXTRACTIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of relevance extractions performed by this process.
pub fn extraction_count() -> usize {
    EXTRACTIONS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    Relevance,
    Corrupted,
    Uniform,
    External,
}

/// Per-patch weights in `[0, 1]` laid out on the patch grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptMap {
    pub weights: Tensor,
    pub source: PromptSource,
}

impl PromptMap {
    pub fn uniform(rows: usize, cols: usize) -> Self {
        Self {
            weights: Tensor::filled(rows, cols, 1.0),
            source: PromptSource::Uniform,
        }
    }

    /// Wrap externally supplied weights, checking the `[0, 1]` range.
    pub fn from_weights(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(DapError::Range {
                context: "prompt weight",
                value: bad,
            });
        }
        Ok(Self {
            weights: Tensor::from_vec(rows, cols, weights)?,
            source: PromptSource::External,
        })
    }

    /// Min-max normalize raw relevance. A constant map carries no
    /// information and becomes all ones.
    pub fn from_raw(rows: usize, cols: usize, raw: &[f64]) -> Result<Self> {
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(DapError::NonFinite("relevance"));
        }
        let span = hi - lo;
        let data = if span <= f64::EPSILON * hi.abs().max(1.0) {
            vec![1.0; raw.len()]
        } else {
            raw.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
        };
        Ok(Self {
            weights: Tensor::from_vec(rows, cols, data)?,
            source: PromptSource::Relevance,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weights.shape()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Nearest-neighbour upsampling to `height × width` pixels, row-major.
    pub fn upsample(&self, height: usize, width: usize) -> Vec<f64> {
        let (rows, cols) = self.shape();
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            let r = y * rows / height;
            for x in 0..width {
                out.push(self.weights.get(r, x * cols / width));
            }
        }
        out
    }
}

/// Among entries above the importance threshold, zero the top `k_percent`
/// by value. Ties keep grid order.
pub fn corrupt_prompt(prompt: &PromptMap, k_percent: f64) -> PromptMap {
    let mut out = prompt.clone();
    let mut important: Vec<usize> = (0..prompt.len())
        .filter(|&i| prompt.weights.data()[i] > IMPORTANCE_THRESHOLD)
        .collect();
    let k = k_percent.clamp(0.0, 100.0);
    let count = crate::math::round(k / 100.0 * important.len() as f64) as usize;
    if count == 0 {
        return out;
    }
    important.sort_by(|&a, &b| {
        let (va, vb) = (prompt.weights.data()[a], prompt.weights.data()[b]);
        vb.total_cmp(&va).then(a.cmp(&b))
    });
    for &i in &important[..count] {
        out.weights.data_mut()[i] = 0.0;
    }
    out.source = PromptSource::Corrupted;
    out
}

/// Attention maps of one layer and their gradients, one entry per head.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttention {
    pub attention: Vec<Tensor>,
    pub grads: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AttentionRecord {
    pub layers: Vec<LayerAttention>,
}

/// `R ← I; R ← R + mean_h((∇A ⊙ A)⁺)·R` over layers in order; returns the
/// global-token row restricted to patch columns.
pub fn rollout(record: &AttentionRecord) -> Result<Vec<f64>> {
    let first = record
        .layers
        .first()
        .and_then(|l| l.attention.first())
        .ok_or(DapError::Instrumentation("attention record is empty"))?;
    let t = first.rows();
    let mut r = Tensor::identity(t);
    for layer in &record.layers {
        if layer.attention.len() != layer.grads.len() || layer.attention.is_empty() {
            return Err(DapError::Instrumentation("attention and gradient heads differ"));
        }
        let mut bar = Tensor::zeros(t, t);
        for (a, ga) in layer.attention.iter().zip(&layer.grads) {
            if a.shape() != (t, t) || ga.shape() != (t, t) {
                return Err(DapError::Dimension {
                    context: "attention map",
                    expected: t * t,
                    actual: a.len().max(ga.len()),
                });
            }
            for ((b, &x), &gx) in bar.data_mut().iter_mut().zip(a.data()).zip(ga.data()) {
                *b += (x * gx).max(0.0);
            }
        }
        let h = layer.attention.len() as f64;
        bar.data_mut().iter_mut().for_each(|b| *b /= h);
        let update = bar.matmul(&r);
        r.add_assign(&update);
    }
    Ok(r.row(0)[1..].to_vec())
}

fn cosine_node(g: &mut Graph, a: Var, b: Var) -> Var {
    let a = g.row_normalize(a);
    let b = g.row_normalize(b);
    g.matmul_t(a, b)
}

struct ScoreGraph {
    graph: Graph,
    score: Var,
    attention: Vec<Vec<Var>>,
}

fn score_graph(model: &Model, image: &Image, tokens: &[u32], track: bool) -> Result<ScoreGraph> {
    let patches = model.patches(image)?;
    let mut g = Graph::new();
    let p: Bound = model.params.bind_constants(&mut g);
    let x = g.constant(patches);
    let fwd = model.vision.forward(&mut g, &p, x, None, track);
    let cls = model.text.forward(&mut g, &p, tokens)?;
    let img = g.slice_rows(fwd.tokens, 0, 1);
    let score = cosine_node(&mut g, img, cls);
    Ok(ScoreGraph {
        graph: g,
        score,
        attention: fwd.layers.into_iter().map(|l| l.attention).collect(),
    })
}

/// `cos([IMG], [CLS])` of the unprompted pass.
pub fn matching_score(model: &Model, image: &Image, tokens: &[u32]) -> Result<f64> {
    let sg = score_graph(model, image, tokens, false)?;
    Ok(sg.graph.value(sg.score).item())
}

/// Attention maps of every image layer with gradients of the matching score.
pub fn attention_record(model: &Model, image: &Image, tokens: &[u32]) -> Result<AttentionRecord> {
    EXTRACTIONS.fetch_add(1, Ordering::Relaxed);
    let mut sg = score_graph(model, image, tokens, true)?;
    sg.graph.backward(sg.score);
    let g = &sg.graph;
    let layers = sg
        .attention
        .iter()
        .map(|heads| LayerAttention {
            attention: heads.iter().map(|&a| g.value(a).clone()).collect(),
            grads: heads
                .iter()
                .map(|&a| {
                    let v = g.value(a);
                    g.grad(a).cloned().unwrap_or_else(|| Tensor::zeros(v.rows(), v.cols()))
                })
                .collect(),
        })
        .collect();
    Ok(AttentionRecord { layers })
}

/// Source of per-patch relevance for an image-text pair.
pub trait RelevanceBackend {
    fn name(&self) -> &'static str;
    fn relevance(&self, model: &Model, image: &Image, tokens: &[u32]) -> Result<PromptMap>;
}

/// Gradient-weighted attention propagation through every image layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradientAttention;

impl RelevanceBackend for GradientAttention {
    fn name(&self) -> &'static str {
        "gradient-attention"
    }

    fn relevance(&self, model: &Model, image: &Image, tokens: &[u32]) -> Result<PromptMap> {
        let record = attention_record(model, image, tokens)?;
        let (rows, cols) = model.grid_shape();
        relevance_from_record(&record, rows, cols)
    }
}

pub fn relevance_from_record(record: &AttentionRecord, rows: usize, cols: usize) -> Result<PromptMap> {
    let raw = rollout(record)?;
    if raw.len() != rows * cols {
        return Err(DapError::Dimension {
            context: "relevance grid",
            expected: rows * cols,
            actual: raw.len(),
        });
    }
    PromptMap::from_raw(rows, cols, &raw)
}

/// Φ for one image-text pair with the default backend.
pub fn relevance_map(model: &Model, image: &Image, tokens: &[u32]) -> Result<PromptMap> {
    GradientAttention.relevance(model, image, tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn hand_rollout_3x3() {
        let a = t(3, 3, &[0.5, 0.3, 0.2, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4]);
        let ga = t(3, 3, &[1.0, 2.0, -1.0, 0.0, 1.0, 1.0, -2.0, 0.5, 1.0]);
        let record = AttentionRecord {
            layers: vec![LayerAttention {
                attention: vec![a],
                grads: vec![ga],
            }],
        };
        // (∇A⊙A)⁺ row 0 = [0.5, 0.6, 0]; R = I + that, so row 0 = [1.5, 0.6, 0].
        let raw = rollout(&record).unwrap();
        assert_eq!(raw, vec![0.6, 0.0]);
        let pm = relevance_from_record(&record, 1, 2).unwrap();
        assert_eq!(pm.weights.data(), &[1.0, 0.0]);
    }

    #[test]
    fn negative_products_are_clamped() {
        let a = t(3, 3, &[0.2; 9]);
        let ga = t(3, 3, &[-1.0; 9]);
        let record = AttentionRecord {
            layers: vec![LayerAttention {
                attention: vec![a],
                grads: vec![ga],
            }],
        };
        assert_eq!(rollout(&record).unwrap(), vec![0.0, 0.0]);
        let pm = relevance_from_record(&record, 1, 2).unwrap();
        assert_eq!(pm.weights.data(), &[1.0, 1.0]);
    }

    #[test]
    fn missing_trace_is_instrumentation_error() {
        assert!(matches!(rollout(&AttentionRecord::default()), Err(DapError::Instrumentation(_))));
    }

    #[test]
    fn corrupt_fixtures() {
        let mut w = vec![0.1; 16];
        for (k, i) in (0..10).enumerate() {
            w[i] = 0.35 + 0.05 * k as f64;
        }
        let pm = PromptMap::from_weights(4, 4, w.clone()).unwrap();
        assert_eq!(corrupt_prompt(&pm, 0.0), pm);
        let half = corrupt_prompt(&pm, 50.0);
        let mut sorted: Vec<usize> = (0..10).collect();
        sorted.sort_by(|&a, &b| w[b].total_cmp(&w[a]));
        for (rank, &i) in sorted.iter().enumerate() {
            let expect = if rank < 5 { 0.0 } else { w[i] };
            assert_eq!(half.weights.data()[i], expect);
        }
        assert_eq!(half.source, PromptSource::Corrupted);
        let full = corrupt_prompt(&pm, 100.0);
        assert!(full.weights.data().iter().all(|&v| v <= IMPORTANCE_THRESHOLD));
        let low = PromptMap::from_weights(1, 2, vec![0.1, 0.2]).unwrap();
        assert_eq!(corrupt_prompt(&low, 70.0), low);
    }

    #[test]
    fn upsample_is_nearest() {
        let pm = PromptMap::from_weights(2, 2, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let up = pm.upsample(4, 4);
        assert_eq!(&up[..4], &[0.0, 0.0, 0.25, 0.25]);
        assert_eq!(&up[12..], &[0.5, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn range_is_checked() {
        assert!(PromptMap::from_weights(1, 1, vec![1.5]).is_err());
    }
}
