//! Global contrastive, local foreground/background contrastive and Dice
//! objectives, as plain functions and as graph builders for training.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{DapError, Result};
use crate::math;
use crate::model::cosine_sim;
use crate::prompting::FgBgPartition;

pub const DEFAULT_DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_glb: f64,
    pub w_lcl: f64,
    pub w_seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_glb: 1.0,
            w_lcl: 0.1,
            w_seg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("loss.w_glb", self.w_glb), ("loss.w_lcl", self.w_lcl), ("loss.w_seg", self.w_seg)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(DapError::Config(format!("{name} must be a finite value >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveOptions {
    pub temperature: f64,
    /// Sum only over negatives in the denominator, dropping the positive.
    pub literal_denominator: bool,
}

impl Default for ContrastiveOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            literal_denominator: false,
        }
    }
}

impl ContrastiveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DapError::Config(format!(
                "loss.temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// `mask[i·n + j]`: whether column `j` enters row `i`'s denominator.
/// Negatives are samples whose class set differs; `None` treats every other
/// sample as a negative.
pub fn contrastive_mask(n: usize, classes: Option<&[Vec<usize>]>, literal: bool) -> Vec<bool> {
    let mut mask = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let keep = if i == j {
                !literal
            } else {
                classes.map_or(true, |c| c[i] != c[j])
            };
            mask.push(keep);
        }
    }
    mask
}

fn check_batch(img: usize, cls: usize, classes: Option<&[Vec<usize>]>) -> Result<()> {
    if img != cls {
        return Err(DapError::Dimension {
            context: "contrastive batch",
            expected: img,
            actual: cls,
        });
    }
    if img < 2 {
        return Err(DapError::BatchTooSmall(img));
    }
    if let Some(c) = classes {
        if c.len() != img {
            return Err(DapError::Dimension {
                context: "contrastive class sets",
                expected: img,
                actual: c.len(),
            });
        }
    }
    Ok(())
}

/// Image-to-text contrastive loss over a batch of global tokens.
pub fn global_contrastive(
    img: &[Vec<f64>],
    cls: &[Vec<f64>],
    classes: Option<&[Vec<usize>]>,
    options: &ContrastiveOptions,
) -> Result<f64> {
    options.validate()?;
    check_batch(img.len(), cls.len(), classes)?;
    let n = img.len();
    let mask = contrastive_mask(n, classes, options.literal_denominator);
    let mut total = 0.0;
    let mut rows = 0usize;
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| cosine_sim(&img[i], &cls[j]).map(|c| c / options.temperature))
            .collect::<Result<_>>()?;
        let mut lse = f64::NEG_INFINITY;
        for j in 0..n {
            if mask[i * n + j] {
                lse = math::log_add_exp(lse, logits[j]);
            }
        }
        if lse == f64::NEG_INFINITY {
            continue;
        }
        total += lse - logits[i];
        rows += 1;
    }
    Ok(if rows == 0 { 0.0 } else { total / rows as f64 })
}

/// Outcome of the local loss for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalLoss {
    pub value: f64,
    /// No foreground tokens: the term was skipped.
    pub skipped: bool,
}

pub fn local_contrastive(partition: &FgBgPartition, cls: &[f64], temperature: f64) -> Result<LocalLoss> {
    if !(temperature > 0.0) {
        return Err(DapError::Config(format!("loss.temperature must be > 0, got {temperature}")));
    }
    if partition.bg_tokens.is_empty() {
        return Err(DapError::EmptyBackground);
    }
    if partition.fg_tokens.is_empty() {
        return Ok(LocalLoss {
            value: 0.0,
            skipped: true,
        });
    }
    let bg: Vec<f64> = partition
        .bg_tokens
        .iter()
        .map(|v| cosine_sim(v, cls).map(|c| c / temperature))
        .collect::<Result<_>>()?;
    let bg_lse = bg.iter().fold(f64::NEG_INFINITY, |acc, &s| math::log_add_exp(acc, s));
    let mut total = 0.0;
    for v in &partition.fg_tokens {
        let s = cosine_sim(v, cls)? / temperature;
        total += math::log_add_exp(s, bg_lse) - s;
    }
    Ok(LocalLoss {
        value: total / partition.fg_tokens.len() as f64,
        skipped: false,
    })
}

/// `1 − (2·Σ p·t + ε) / (Σ p + Σ t + ε)`
pub fn dice_loss(pred: &[f64], target: &[f64], eps: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(DapError::Dimension {
            context: "dice_loss",
            expected: target.len(),
            actual: pred.len(),
        });
    }
    if let Some(&bad) = pred.iter().chain(target).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DapError::Range {
            context: "dice_loss input",
            value: bad,
        });
    }
    let inter: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
    let denom = pred.iter().sum::<f64>() + target.iter().sum::<f64>() + eps;
    Ok(1.0 - (2.0 * inter + eps) / denom)
}

pub fn total_loss(glb: f64, lcl: f64, seg: f64, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [("global", glb), ("local", lcl), ("segmentation", seg)] {
        if !v.is_finite() {
            return Err(DapError::NonFinite(name));
        }
    }
    Ok(weights.w_glb * glb + weights.w_lcl * lcl + weights.w_seg * seg)
}

/// Graph form of [`global_contrastive`]; `img` and `cls` are `n × e`.
/// With `symmetric`, the text-to-image direction is averaged in.
pub fn global_contrastive_var(
    g: &mut Graph,
    img: Var,
    cls: Var,
    classes: Option<&[Vec<usize>]>,
    options: &ContrastiveOptions,
    symmetric: bool,
) -> Result<Var> {
    options.validate()?;
    let n = g.value(img).rows();
    check_batch(n, g.value(cls).rows(), classes)?;
    let mask = contrastive_mask(n, classes, options.literal_denominator);
    let a = g.row_normalize(img);
    let b = g.row_normalize(cls);
    let i2t = g.matmul_t(a, b);
    let i2t = g.scale(i2t, 1.0 / options.temperature);
    let forward = diagonal_nll(g, i2t, &mask, n);
    if !symmetric {
        return Ok(forward);
    }
    let t2i = g.matmul_t(b, a);
    let t2i = g.scale(t2i, 1.0 / options.temperature);
    let backward = diagonal_nll(g, t2i, &mask, n);
    Ok(g.weighted_sum(&[(forward, 0.5), (backward, 0.5)]))
}

/// Mean of `−log_softmax` on the diagonal over rows with a non-empty mask.
fn diagonal_nll(g: &mut Graph, logits: Var, mask: &[bool], n: usize) -> Var {
    let live: Vec<usize> = (0..n).filter(|&i| mask[i * n..(i + 1) * n].iter().any(|&m| m)).collect();
    // Dead rows only occur under the literal form; give them a harmless
    // normalizer and leave them out of the mean.
    let mut safe = mask.to_vec();
    for i in 0..n {
        if !live.contains(&i) {
            safe[i * n + i] = true;
        }
    }
    let ls = g.masked_log_softmax(logits, safe);
    if live.is_empty() {
        return g.constant(crate::tensor::Tensor::scalar(0.0));
    }
    let diag = g.gather(ls, live.iter().map(|&i| i * n + i).collect(), live.len(), 1);
    let m = g.mean(diag);
    g.scale(m, -1.0)
}

/// Graph form of [`local_contrastive`] for one sample; `patches` is
/// `n × e`, `cls` is `1 × e`. Returns `None` when the term is skipped.
pub fn local_contrastive_var(
    g: &mut Graph,
    patches: Var,
    cls: Var,
    fg: &[usize],
    bg: &[usize],
    temperature: f64,
) -> Result<Option<Var>> {
    if bg.is_empty() {
        return Err(DapError::EmptyBackground);
    }
    if fg.is_empty() {
        return Ok(None);
    }
    let v = g.row_normalize(patches);
    let c = g.row_normalize(cls);
    let sims = g.matmul_t(v, c);
    let sims = g.scale(sims, 1.0 / temperature);
    let width = 1 + bg.len();
    let mut index = Vec::with_capacity(fg.len() * width);
    for &f in fg {
        index.push(f);
        index.extend_from_slice(bg);
    }
    let table = g.gather(sims, index, fg.len(), width);
    let ls = g.masked_log_softmax(table, alloc::vec![true; fg.len() * width]);
    let pos = g.slice_cols(ls, 0, 1);
    let m = g.mean(pos);
    Ok(Some(g.scale(m, -1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_grads;
    use crate::tensor::Tensor;
    use alloc::vec;

    const LN2: f64 = core::f64::consts::LN_2;

    #[test]
    fn global_fixtures() {
        // Every image orthogonal to every text.
        let img4 = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
        let cls4 = vec![vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]];
        let opts = ContrastiveOptions::default();
        assert!((global_contrastive(&img4, &cls4, None, &opts).unwrap() - LN2).abs() < 1e-12);
        // Positive cosine 1, negatives −1, small temperature → 0.
        let cold = ContrastiveOptions {
            temperature: 0.01,
            ..opts
        };
        let pos_img = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let pos_cls = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert!(global_contrastive(&pos_img, &pos_cls, None, &cold).unwrap() < 1e-60);
        assert_eq!(global_contrastive(&img4[..1], &cls4[..1], None, &opts), Err(DapError::BatchTooSmall(1)));
        let hot = ContrastiveOptions {
            temperature: 0.0,
            ..opts
        };
        assert!(matches!(global_contrastive(&img4, &cls4, None, &hot), Err(DapError::Config(_))));
    }

    #[test]
    fn global_is_scale_invariant() {
        let img = vec![vec![0.3, -0.2, 1.0], vec![0.5, 0.9, -0.1], vec![-0.7, 0.2, 0.4]];
        let cls = vec![vec![0.1, 0.4, 0.2], vec![-0.6, 0.3, 0.8], vec![0.2, -0.5, 0.1]];
        let opts = ContrastiveOptions::default();
        let a = global_contrastive(&img, &cls, None, &opts).unwrap();
        let mut scaled = img.clone();
        scaled[1].iter_mut().for_each(|v| *v *= 7.5);
        let b = global_contrastive(&scaled, &cls, None, &opts).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn local_fixtures() {
        let part = FgBgPartition {
            fg: vec![0],
            bg: vec![1],
            fg_tokens: vec![vec![1.0, 0.0]],
            bg_tokens: vec![vec![1.0, 0.0]],
            threshold_used: 0.3,
        };
        let l = local_contrastive(&part, &[1.0, 1.0], 1.0).unwrap();
        assert!((l.value - LN2).abs() < 1e-12 && !l.skipped);
        let empty_fg = FgBgPartition {
            fg: vec![],
            fg_tokens: vec![],
            ..part.clone()
        };
        assert_eq!(
            local_contrastive(&empty_fg, &[1.0, 1.0], 1.0).unwrap(),
            LocalLoss {
                value: 0.0,
                skipped: true
            }
        );
        let empty_bg = FgBgPartition {
            bg: vec![],
            bg_tokens: vec![],
            ..part.clone()
        };
        assert_eq!(local_contrastive(&empty_bg, &[1.0, 1.0], 1.0), Err(DapError::EmptyBackground));
        // Raising a background cosine raises the loss.
        let mut closer = part.clone();
        closer.bg_tokens = vec![vec![1.0, 0.9]];
        let base = local_contrastive(&part, &[1.0, 0.0], 1.0).unwrap().value;
        let more = local_contrastive(&closer, &[0.8, 0.6], 1.0).unwrap().value;
        let less = local_contrastive(&closer, &[1.0, 0.0], 1.0).unwrap().value;
        assert!(more > less && base > less);
    }

    #[test]
    fn dice_fixtures() {
        assert!((dice_loss(&[0.5; 4], &[0.5; 4], 1.0).unwrap() - 0.4).abs() < 1e-12);
        assert!(dice_loss(&[0.0; 4], &[1.0; 4], 1e-6).unwrap() > 0.999);
        let t = [1.0, 0.0, 1.0, 1.0];
        assert!(dice_loss(&t, &t, 1e-6).unwrap() < 1e-6);
        assert!(matches!(dice_loss(&[1.2], &[0.0], 1.0), Err(DapError::Range { .. })));
        let p = [0.2, 0.7, 0.1, 0.9];
        assert_eq!(dice_loss(&p, &t, 1.0).unwrap(), dice_loss(&t, &p, 1.0).unwrap());
    }

    #[test]
    fn total_fixtures() {
        let ones = LossWeights {
            w_glb: 1.0,
            w_lcl: 1.0,
            w_seg: 1.0,
        };
        assert_eq!(total_loss(0.5, 0.25, 0.25, &ones).unwrap(), 1.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &LossWeights::default()).unwrap(), 0.0);
        assert_eq!(LossWeights::default(), LossWeights { w_glb: 1.0, w_lcl: 0.1, w_seg: 1.0 });
        assert_eq!(total_loss(f64::NAN, 0.0, 0.0, &ones), Err(DapError::NonFinite("global")));
        assert_eq!(total_loss(0.0, 0.0, f64::INFINITY, &ones), Err(DapError::NonFinite("segmentation")));
    }

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
    }

    #[test]
    fn graph_forms_match_plain_forms() {
        let img = rand_tensor(5, 4, 1);
        let cls = rand_tensor(5, 4, 2);
        let classes = vec![vec![0], vec![1], vec![0], vec![2], vec![3]];
        for literal in [false, true] {
            let opts = ContrastiveOptions {
                temperature: 0.5,
                literal_denominator: literal,
            };
            let plain = global_contrastive(&rows(&img), &rows(&cls), Some(&classes), &opts).unwrap();
            let mut g = Graph::new();
            let a = g.constant(img.clone());
            let b = g.constant(cls.clone());
            let v = global_contrastive_var(&mut g, a, b, Some(&classes), &opts, false).unwrap();
            assert!((g.value(v).item() - plain).abs() < 1e-12);
        }
        let patches = rand_tensor(6, 4, 3);
        let c = rand_tensor(1, 4, 4);
        let part = FgBgPartition {
            fg: vec![1, 4],
            bg: vec![0, 2, 3, 5],
            fg_tokens: [1, 4].iter().map(|&i| patches.row(i).to_vec()).collect(),
            bg_tokens: [0, 2, 3, 5].iter().map(|&i| patches.row(i).to_vec()).collect(),
            threshold_used: 0.3,
        };
        let plain = local_contrastive(&part, c.row(0), 0.7).unwrap().value;
        let mut g = Graph::new();
        let pv = g.constant(patches);
        let cv = g.constant(c);
        let v = local_contrastive_var(&mut g, pv, cv, &part.fg, &part.bg, 0.7).unwrap().unwrap();
        assert!((g.value(v).item() - plain).abs() < 1e-12);
    }

    #[test]
    fn losses_pass_finite_differences() {
        for seed in 0..3 {
            let img = rand_tensor(4, 6, 10 + seed);
            let cls = rand_tensor(4, 6, 20 + seed);
            let classes = vec![vec![0], vec![1], vec![1], vec![2]];
            for (literal, symmetric) in [(false, false), (true, false), (false, true)] {
                let opts = ContrastiveOptions {
                    temperature: 0.3,
                    literal_denominator: literal,
                };
                let r = check_param_grads(&[img.clone(), cls.clone()], 1e-6, |g, v| {
                    global_contrastive_var(g, v[0], v[1], Some(&classes), &opts, symmetric).unwrap()
                });
                assert!(r.max_rel_error < 1e-4, "global {literal} {symmetric}: {r:?}");
            }
            let patches = rand_tensor(7, 6, 30 + seed);
            let c = rand_tensor(1, 6, 40 + seed);
            let r = check_param_grads(&[patches, c], 1e-6, |g, v| {
                local_contrastive_var(g, v[0], v[1], &[0, 3], &[1, 2, 4, 5, 6], 0.5).unwrap().unwrap()
            });
            assert!(r.max_rel_error < 1e-4, "local: {r:?}");
            let pred = rand_tensor(3, 3, 50 + seed).map(|v| 0.5 + 0.4 * v);
            let target: Vec<f64> = rand_tensor(3, 3, 60 + seed).data().iter().map(|v| (v + 1.0) / 2.0).collect();
            let r = check_param_grads(&[pred], 1e-6, |g, v| g.soft_dice(v[0], target.clone(), 1.0));
            assert!(r.max_rel_error < 1e-4, "dice: {r:?}");
        }
    }
}
