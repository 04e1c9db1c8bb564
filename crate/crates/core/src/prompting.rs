//! Prompt application and foreground/background token selection.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{DapError, Result};
use crate::relevance::PromptMap;
use crate::tensor::Tensor;

/// Default foreground threshold on prompt weights.
pub const DEFAULT_THRESHOLD: f64 = 0.3;

/// 1-based vision layers whose patch inputs are scaled by the prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayers(Vec<usize>);

impl PromptLayers {
    pub fn new(mut layers: Vec<usize>) -> Self {
        layers.sort_unstable();
        layers.dedup();
        Self(layers)
    }

    pub fn last(depth: usize) -> Self {
        Self(vec![depth])
    }

    pub fn first() -> Self {
        Self(vec![1])
    }

    pub fn full(depth: usize) -> Self {
        Self((1..=depth).collect())
    }

    pub fn first_half(depth: usize) -> Self {
        Self((1..=depth.div_ceil(2)).collect())
    }

    pub fn last_half(depth: usize) -> Self {
        Self((depth / 2 + 1..=depth).collect())
    }

    /// Parse `last`, `first`, `full`, `first-half`, `last-half` or a
    /// comma-separated list such as `2,4`.
    pub fn parse(text: &str, depth: usize) -> Result<Self> {
        let set = match text.trim() {
            "last" => Self::last(depth),
            "first" => Self::first(),
            "full" | "all" => Self::full(depth),
            "first-half" => Self::first_half(depth),
            "last-half" => Self::last_half(depth),
            list => {
                let layers = list
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<core::result::Result<Vec<_>, _>>()
                    .map_err(|_| DapError::Config(format!("prompt.layers: cannot parse `{text}`")))?;
                Self::new(layers)
            }
        };
        set.validate(depth)?;
        Ok(set)
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        match self.0.iter().find(|&&l| l == 0 || l > depth) {
            Some(l) => Err(DapError::Config(format!("prompt layer {l} outside 1..={depth}"))),
            None => Ok(()),
        }
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.binary_search(&layer).is_ok()
    }

    pub fn first_layer(&self) -> Option<usize> {
        self.0.first().copied()
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn describe(&self) -> String {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        parts.join(",")
    }
}

/// Scale patch rows of a `(1 + n) × d` token matrix by `weights` inside a
/// graph; row 0 (the global token) is left untouched.
pub fn apply_prompt_var(g: &mut Graph, tokens: Var, weights: &[f64]) -> Var {
    let mut w = Vec::with_capacity(weights.len() + 1);
    w.push(1.0);
    w.extend_from_slice(weights);
    g.row_scale(tokens, w)
}

/// `v̂_i = Φ_i · v_i` over an `n × d` patch-token matrix.
pub fn apply_prompt(tokens: &Tensor, prompt: &PromptMap) -> Result<Tensor> {
    if tokens.rows() != prompt.weights.len() {
        return Err(DapError::Dimension {
            context: "apply_prompt",
            expected: prompt.weights.len(),
            actual: tokens.rows(),
        });
    }
    let mut out = tokens.clone();
    for (i, &w) in prompt.weights.data().iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|v| *v *= w);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FgBgPartition {
    pub fg: Vec<usize>,
    pub bg: Vec<usize>,
    pub fg_tokens: Vec<Vec<f64>>,
    pub bg_tokens: Vec<Vec<f64>>,
    pub threshold_used: f64,
}

/// Patch indices with `Φ_i > τ`, and the rest.
pub fn partition_indices(prompt: &PromptMap, threshold: f64) -> (Vec<usize>, Vec<usize>) {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (i, &w) in prompt.weights.data().iter().enumerate() {
        if w > threshold {
            fg.push(i);
        } else {
            bg.push(i);
        }
    }
    (fg, bg)
}

pub fn select_fg_bg(tokens: &Tensor, prompt: &PromptMap, threshold: f64) -> Result<FgBgPartition> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(DapError::Config(format!("prompt.threshold must be in (0, 1), got {threshold}")));
    }
    if tokens.rows() != prompt.weights.len() {
        return Err(DapError::Dimension {
            context: "select_fg_bg",
            expected: prompt.weights.len(),
            actual: tokens.rows(),
        });
    }
    let (fg, bg) = partition_indices(prompt, threshold);
    let pick = |idx: &[usize]| idx.iter().map(|&i| tokens.row(i).to_vec()).collect();
    Ok(FgBgPartition {
        fg_tokens: pick(&fg),
        bg_tokens: pick(&bg),
        fg,
        bg,
        threshold_used: threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(rows: usize, cols: usize, w: Vec<f64>) -> PromptMap {
        PromptMap::from_weights(rows, cols, w).unwrap()
    }

    #[test]
    fn apply_prompt_fixtures() {
        let v = Tensor::from_vec(2, 2, vec![2.0, -4.0, 1.0, 3.0]).unwrap();
        assert_eq!(apply_prompt(&v, &PromptMap::uniform(1, 2)).unwrap(), v);
        assert!(apply_prompt(&v, &pm(1, 2, vec![0.0, 0.0])).unwrap().data().iter().all(|&x| x == 0.0));
        let half = apply_prompt(&v, &pm(1, 2, vec![0.5, 1.0])).unwrap();
        assert_eq!(half.row(0), &[1.0, -2.0]);
        assert!(matches!(apply_prompt(&v, &PromptMap::uniform(1, 3)), Err(DapError::Dimension { .. })));
    }

    #[test]
    fn graph_prompt_leaves_global_row() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(3, 2, 2.0));
        let y = apply_prompt_var(&mut g, x, &[0.0, 0.5]);
        assert_eq!(g.value(y).data(), &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn fg_bg_fixtures() {
        let v = Tensor::zeros(2, 3);
        let p = select_fg_bg(&v, &pm(1, 2, vec![0.2, 0.9]), DEFAULT_THRESHOLD).unwrap();
        assert_eq!((p.fg.as_slice(), p.bg.as_slice()), (&[1][..], &[0][..]));
        let p = select_fg_bg(&v, &pm(1, 2, vec![0.0, 0.0]), 0.3).unwrap();
        assert!(p.fg.is_empty());
        assert_eq!(p.bg, vec![0, 1]);
        assert!(select_fg_bg(&v, &pm(1, 2, vec![0.0, 0.0]), 1.0).is_err());
    }

    #[test]
    fn layer_sets() {
        assert_eq!(PromptLayers::first_half(4).layers(), &[1, 2]);
        assert_eq!(PromptLayers::last_half(4).layers(), &[3, 4]);
        assert_eq!(PromptLayers::parse("4, 2", 4).unwrap().layers(), &[2, 4]);
        assert!(PromptLayers::parse("5", 4).is_err());
        assert!(PromptLayers::parse("0", 4).is_err());
    }
}
