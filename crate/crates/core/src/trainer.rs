//! Baseline pretraining, prompted training, few-shot fine-tuning,
//! evaluation and the sweep harnesses.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoder::ground;
use crate::error::{DapError, Result};
use crate::losses::{self, ContrastiveOptions, LossWeights};
use crate::math;
use crate::metrics::{
    alignment_stats, norm_overlap_analysis, stratify, DiagnosticsBlock, MetricsReport, SampleMetrics,
};
use crate::model::Model;
use crate::params::{Bound, ParamStore};
use crate::prompting::{self, PromptLayers};
use crate::relevance::{corrupt_prompt, relevance_map, PromptMap};
use crate::synth::Sample;
use crate::tensor::Tensor;

/// Threshold used when a prompt map itself is scored as a prediction.
pub const PROMPT_PREDICTION_THETA: f64 = 0.3;

/// Corruption levels of the robustness sweep.
pub const ROBUSTNESS_K: [f64; 4] = [10.0, 30.0, 50.0, 70.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSettings {
    /// Foreground threshold on Φ for the local loss.
    pub threshold: f64,
    /// Layer set: `last`, `first`, `full`, `first-half`, `last-half` or a list.
    pub layers: String,
    /// Scale patch tokens by Φ in the training forward pass.
    pub enabled: bool,
    /// Binarize Φ at `threshold` before it becomes the decoder target.
    pub binary_target: bool,
}

impl Default for PromptSettings {
    fn default() -> Self {
        Self {
            threshold: prompting::DEFAULT_THRESHOLD,
            layers: "last".to_string(),
            enabled: true,
            binary_target: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub contrastive: ContrastiveOptions,
    /// Temperature of the baseline pretraining objective.
    pub pretrain_temperature: f64,
    pub dice_eps: f64,
    pub prompt: PromptSettings,
    pub freeze_text: bool,
    pub freeze_vision: bool,
    /// Steps between progress log lines; 0 logs once per epoch.
    pub eval_every: usize,
    /// Decoder binarization threshold.
    pub theta: f64,
    pub few_shot_k: usize,
    pub few_shot_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 10,
            seed: 0,
            loss: LossWeights::default(),
            contrastive: ContrastiveOptions::default(),
            pretrain_temperature: 1.0,
            dice_eps: losses::DEFAULT_DICE_EPS,
            prompt: PromptSettings::default(),
            freeze_text: false,
            freeze_vision: false,
            eval_every: 0,
            theta: crate::decoder::DEFAULT_THETA,
            few_shot_k: 20,
            few_shot_epochs: 30,
        }
    }
}

impl TrainConfig {
    /// Batch 512 at lr 0.008.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 512,
            lr: 0.008,
            ..Self::default()
        }
    }

    /// Batch 512 at lr 1e-3.
    pub fn full_scale_tuned_lr() -> Self {
        Self {
            batch_size: 512,
            lr: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(DapError::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DapError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(DapError::Config("adam betas must be in [0, 1)".to_string()));
        }
        if !(self.pretrain_temperature > 0.0) {
            return Err(DapError::Config("pretrain_temperature must be > 0".to_string()));
        }
        if !(self.prompt.threshold > 0.0 && self.prompt.threshold < 1.0) {
            return Err(DapError::Config("prompt.threshold must be in (0, 1)".to_string()));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(DapError::Config("theta must be in (0, 1)".to_string()));
        }
        self.loss.validate()?;
        self.contrastive.validate()
    }

    pub fn prompt_layers(&self, depth: usize) -> Result<PromptLayers> {
        PromptLayers::parse(&self.prompt.layers, depth)
    }
}

/// Adam with bias correction; frozen parameters are skipped.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: &TrainConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        for (i, g) in grads.iter().enumerate() {
            if params.is_frozen(i) {
                continue;
            }
            let p = &mut params.tensors_mut()[i];
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, (&gk, pk)) in g.data().iter().zip(p.data_mut()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *pk -= self.lr * mh / (math::sqrt(vh) + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub glb: f64,
    pub lcl: f64,
    pub seg: f64,
    /// Fraction of samples whose prompt selected no foreground patch.
    pub empty_fg_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub epochs: Vec<EpochLoss>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub wall_clock_secs: f64,
}

/// Loss components of one batch, detached.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub glb: f64,
    pub lcl: f64,
    pub seg: f64,
    pub empty_fg: usize,
}

/// A built loss graph: the root to differentiate and the parameter handles.
pub struct LossGraph {
    pub graph: Graph,
    pub params: Bound,
    pub root: Var,
    pub parts: BatchLoss,
}

fn apply_freezing(model: &mut Model, config: &TrainConfig) {
    model.params.set_frozen("text.", config.freeze_text);
    model.params.set_frozen("vision.", config.freeze_vision);
}

fn check_finite(v: f64, component: &'static str, epoch: usize, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(DapError::Diverged { epoch, step, component })
    }
}

fn batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    // A trailing batch of one has no negatives; fold it into the previous one.
    let mut out: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

fn class_sets(samples: &[&Sample]) -> Vec<Vec<usize>> {
    samples.iter().map(|s| s.class_ids.clone()).collect()
}

/// Graph of the symmetric global objective on unprompted tokens.
pub fn pretrain_batch_graph(model: &Model, batch: &[&Sample], config: &TrainConfig) -> Result<LossGraph> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let mut imgs = Vec::with_capacity(batch.len());
    let mut texts = Vec::with_capacity(batch.len());
    for s in batch {
        let x = g.constant(model.patches(&s.image)?);
        let f = model.vision.forward(&mut g, &p, x, None, false);
        imgs.push(g.slice_rows(f.tokens, 0, 1));
        texts.push(model.text.forward(&mut g, &p, &s.text_tokens)?);
    }
    let img = g.concat_rows(&imgs);
    let cls = g.concat_rows(&texts);
    let opts = ContrastiveOptions {
        temperature: config.pretrain_temperature,
        literal_denominator: false,
    };
    let root = losses::global_contrastive_var(&mut g, img, cls, Some(&class_sets(batch)), &opts, true)?;
    let v = g.value(root).item();
    Ok(LossGraph {
        graph: g,
        params: p,
        root,
        parts: BatchLoss {
            total: v,
            glb: v,
            ..Default::default()
        },
    })
}

/// Graph of the prompted objective for one batch.
///
/// The global term uses the prompted [IMG]; the local term and the decoder
/// use the unprompted final patch tokens.
pub fn dap_batch_graph(
    model: &Model,
    batch: &[&Sample],
    prompts: &[&PromptMap],
    config: &TrainConfig,
) -> Result<LossGraph> {
    let depth = model.config().vision.depth;
    let layers = config.prompt_layers(depth)?;
    let n = model.config().vision.num_patches();
    let w = config.loss;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let mut imgs = Vec::with_capacity(batch.len());
    let mut texts = Vec::with_capacity(batch.len());
    let mut locals = Vec::new();
    let mut segs = Vec::new();
    let mut empty_fg = 0;
    for (s, phi) in batch.iter().zip(prompts) {
        model.check_prompt(phi)?;
        let x = g.constant(model.patches(&s.image)?);
        let (plain, prompted) = if config.prompt.enabled && w.w_glb > 0.0 {
            let (u, pr) = model.vision.forward_pair(&mut g, &p, x, phi.weights.data(), &layers);
            (u.tokens, pr.tokens)
        } else {
            let u = model.vision.forward(&mut g, &p, x, None, false).tokens;
            (u, u)
        };
        let cls = model.text.forward(&mut g, &p, &s.text_tokens)?;
        texts.push(cls);
        imgs.push(g.slice_rows(prompted, 0, 1));
        let v = g.slice_rows(plain, 1, n);
        let (fg, bg) = prompting::partition_indices(phi, config.prompt.threshold);
        if fg.is_empty() {
            empty_fg += 1;
        }
        if w.w_lcl > 0.0 && !bg.is_empty() {
            if let Some(l) = losses::local_contrastive_var(&mut g, v, cls, &fg, &bg, config.contrastive.temperature)? {
                locals.push(l);
            }
        }
        if w.w_seg > 0.0 {
            let pred = model.decoder.forward(&mut g, &p, v, cls);
            let (h, wd) = (s.image.height, s.image.width);
            let mut target = phi.upsample(h, wd);
            if config.prompt.binary_target {
                let t = config.prompt.threshold;
                target.iter_mut().for_each(|v| *v = if *v > t { 1.0 } else { 0.0 });
            }
            segs.push(g.soft_dice(pred, target, config.dice_eps));
        }
    }
    let mut terms = Vec::new();
    let mut parts = BatchLoss {
        empty_fg,
        ..Default::default()
    };
    if w.w_glb > 0.0 {
        let img = g.concat_rows(&imgs);
        let cls = g.concat_rows(&texts);
        let glb = losses::global_contrastive_var(
            &mut g,
            img,
            cls,
            Some(&class_sets(batch)),
            &config.contrastive,
            false,
        )?;
        parts.glb = g.value(glb).item();
        terms.push((glb, w.w_glb));
    }
    if !locals.is_empty() {
        let all = g.concat_rows(&locals);
        let lcl = g.mean(all);
        parts.lcl = g.value(lcl).item();
        terms.push((lcl, w.w_lcl));
    }
    if !segs.is_empty() {
        let all = g.concat_rows(&segs);
        let seg = g.mean(all);
        parts.seg = g.value(seg).item();
        terms.push((seg, w.w_seg));
    }
    let root = if terms.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        g.weighted_sum(&terms)
    };
    parts.total = g.value(root).item();
    Ok(LossGraph {
        graph: g,
        params: p,
        root,
        parts,
    })
}

/// Graph of the Dice objective against ground-truth masks.
pub fn supervised_batch_graph(model: &Model, batch: &[&Sample], config: &TrainConfig) -> Result<LossGraph> {
    let n = model.config().vision.num_patches();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let mut segs = Vec::with_capacity(batch.len());
    for s in batch {
        let x = g.constant(model.patches(&s.image)?);
        let u = model.vision.forward(&mut g, &p, x, None, false).tokens;
        let v = g.slice_rows(u, 1, n);
        let cls = model.text.forward(&mut g, &p, &s.text_tokens)?;
        let pred = model.decoder.forward(&mut g, &p, v, cls);
        let target = s.gt_mask().data.iter().map(|&b| b as f64).collect();
        segs.push(g.soft_dice(pred, target, config.dice_eps));
    }
    let all = g.concat_rows(&segs);
    let root = g.mean(all);
    let v = g.value(root).item();
    Ok(LossGraph {
        graph: g,
        params: p,
        root,
        parts: BatchLoss {
            total: v,
            seg: v,
            ..Default::default()
        },
    })
}

/// Shared optimization loop. `build` makes the loss graph of one batch of
/// sample indices.
fn optimize<F>(model: &mut Model, n: usize, config: &TrainConfig, epochs: usize, mut build: F) -> Result<Vec<EpochLoss>>
where
    F: FnMut(&Model, &[usize]) -> Result<LossGraph>,
{
    config.validate()?;
    apply_freezing(model, config);
    let mut adam = Adam::new(&model.params, config);
    let mut history = Vec::with_capacity(epochs);
    let mut step = 0;
    for epoch in 0..epochs {
        let mut acc = EpochLoss {
            epoch,
            ..Default::default()
        };
        let mut seen = 0usize;
        let mut empty = 0usize;
        for batch in batches(n, config.batch_size, config.seed, epoch) {
            let mut lg = build(model, &batch)?;
            let parts = lg.parts;
            check_finite(parts.glb, "global", epoch, step)?;
            check_finite(parts.lcl, "local", epoch, step)?;
            check_finite(parts.seg, "segmentation", epoch, step)?;
            check_finite(parts.total, "total", epoch, step)?;
            lg.graph.backward(lg.root);
            let grads = model.params.collect_grads(&lg.graph, &lg.params);
            if grads.iter().any(|t| !t.is_finite()) {
                return Err(DapError::Diverged {
                    epoch,
                    step,
                    component: "gradient",
                });
            }
            adam.step(&mut model.params, &grads);
            let b = batch.len() as f64;
            acc.total += parts.total * b;
            acc.glb += parts.glb * b;
            acc.lcl += parts.lcl * b;
            acc.seg += parts.seg * b;
            seen += batch.len();
            empty += parts.empty_fg;
            step += 1;
            if config.eval_every > 0 && step % config.eval_every == 0 {
                log::info!("epoch {epoch} step {step}: loss {:.5}", parts.total);
            }
        }
        let s = seen.max(1) as f64;
        acc.total /= s;
        acc.glb /= s;
        acc.lcl /= s;
        acc.seg /= s;
        acc.empty_fg_fraction = empty as f64 / s;
        if acc.empty_fg_fraction > 0.9 {
            log::warn!(
                "epoch {epoch}: {:.0}% of prompts select no foreground; prompt.threshold may be misconfigured",
                100.0 * acc.empty_fg_fraction
            );
        }
        log::info!(
            "epoch {epoch}: total {:.5} glb {:.5} lcl {:.5} seg {:.5}",
            acc.total,
            acc.glb,
            acc.lcl,
            acc.seg
        );
        history.push(acc);
    }
    model.params.set_frozen("", false);
    Ok(history)
}

/// Train both towers with the symmetric global objective only. On
/// divergence the model keeps the last finite parameters.
pub fn pretrain_baseline(model: &mut Model, samples: &[Sample], config: &TrainConfig) -> Result<RunRecord> {
    let epochs = optimize(model, samples.len(), config, config.epochs, |m, idx| {
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        pretrain_batch_graph(m, &batch, config)
    })?;
    Ok(RunRecord {
        config: config.clone(),
        epochs,
        ..Default::default()
    })
}

/// Prompt source for prompted training.
pub enum Prompts<'a> {
    /// Precomputed maps aligned with the training samples.
    Cached(&'a [PromptMap]),
    /// Extract from a frozen model at every step.
    OnTheFly(&'a Model),
}

impl Prompts<'_> {
    fn get(&self, samples: &[&Sample], idx: &[usize]) -> Result<Vec<PromptMap>> {
        match self {
            Prompts::Cached(maps) => Ok(idx.iter().map(|&i| maps[i].clone()).collect()),
            Prompts::OnTheFly(base) => samples
                .iter()
                .map(|s| relevance_map(base, &s.image, &s.text_tokens))
                .collect(),
        }
    }
}

/// Φ for every sample from a frozen model.
pub fn extract_prompts(model: &Model, samples: &[Sample]) -> Result<Vec<PromptMap>> {
    samples.iter().map(|s| relevance_map(model, &s.image, &s.text_tokens)).collect()
}

/// Prompted training starting from `model` (normally the baseline).
pub fn train_dap(model: &mut Model, samples: &[Sample], prompts: Prompts<'_>, config: &TrainConfig) -> Result<RunRecord> {
    if let Prompts::Cached(maps) = &prompts {
        if maps.len() != samples.len() {
            return Err(DapError::Dimension {
                context: "cached prompts",
                expected: samples.len(),
                actual: maps.len(),
            });
        }
    }
    let epochs = optimize(model, samples.len(), config, config.epochs, |m, idx| {
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let maps = prompts.get(&batch, idx)?;
        let refs: Vec<&PromptMap> = maps.iter().collect();
        dap_batch_graph(m, &batch, &refs, config)
    })?;
    Ok(RunRecord {
        config: config.clone(),
        epochs,
        ..Default::default()
    })
}

/// Loss of the first batch of epoch 0 without updating the model.
pub fn dap_initial_loss(model: &Model, samples: &[Sample], prompts: Prompts<'_>, config: &TrainConfig) -> Result<BatchLoss> {
    let idx = batches(samples.len(), config.batch_size, config.seed, 0).remove(0);
    let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
    let maps = prompts.get(&batch, &idx)?;
    let refs: Vec<&PromptMap> = maps.iter().collect();
    Ok(dap_batch_graph(model, &batch, &refs, config)?.parts)
}

/// Dice fine-tuning against ground truth on the first `k` samples.
pub fn finetune_fewshot(model: &mut Model, samples: &[Sample], k: usize, config: &TrainConfig) -> Result<RunRecord> {
    if k > samples.len() {
        return Err(DapError::Config(format!("few-shot k = {k} exceeds the {} available samples", samples.len())));
    }
    if k == 0 {
        log::warn!("few-shot k = 0: nothing to fine-tune");
        return Ok(RunRecord {
            config: config.clone(),
            ..Default::default()
        });
    }
    let subset = &samples[..k];
    let mut cfg = config.clone();
    cfg.batch_size = cfg.batch_size.min(k.max(2));
    let epochs = optimize(model, k, &cfg, cfg.few_shot_epochs, |m, idx| {
        let batch: Vec<&Sample> = idx.iter().map(|&i| &subset[i]).collect();
        supervised_batch_graph(m, &batch, &cfg)
    })?;
    Ok(RunRecord {
        config: cfg,
        epochs,
        ..Default::default()
    })
}

/// Unprompted inference: encoder, decoder, metrics. Never touches Φ.
pub fn evaluate(model: &Model, samples: &[Sample], theta: f64, with_diagnostics: bool) -> Result<MetricsReport> {
    let layers = PromptLayers::last(model.config().vision.depth);
    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        let bundle = model.encode_image(&s.image, None, &layers)?;
        let cls = model.encode_text(&s.text_tokens)?.cls_token;
        let map = ground(model, &bundle, &cls)?;
        per_sample.push(SampleMetrics::score(s, map.scores.data(), theta)?);
    }
    let mut report = MetricsReport::from_samples(per_sample);
    if with_diagnostics {
        let overlap = norm_overlap_analysis(model, samples, theta)?;
        let align = alignment_stats(model, samples, None, &layers)?;
        let strata = strata_of(&report);
        report.diagnostics = Some(DiagnosticsBlock::new(overlap, &align, strata));
    }
    Ok(report)
}

pub fn strata_of(report: &MetricsReport) -> crate::metrics::Strata {
    let areas: Vec<usize> = report.per_sample.iter().map(|s| s.lesion_area).collect();
    let counts: Vec<usize> = report.per_sample.iter().map(|s| s.lesion_count).collect();
    let dice: Vec<f64> = report.per_sample.iter().map(|s| s.dice).collect();
    stratify(&areas, &counts, &dice)
}

/// Text-to-image retrieval: the fraction of texts whose most similar image
/// (by `cos([CLS], [IMG])`) has the same class set.
pub fn retrieval_accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    let layers = PromptLayers::last(model.config().vision.depth);
    let imgs = samples
        .iter()
        .map(|s| model.encode_image(&s.image, None, &layers).map(|b| b.img_token))
        .collect::<Result<Vec<_>>>()?;
    let mut hits = 0;
    for s in samples {
        let cls = model.encode_text(&s.text_tokens)?.cls_token;
        let mut best = (f64::NEG_INFINITY, 0);
        for (j, img) in imgs.iter().enumerate() {
            let c = crate::model::cosine_sim(&cls, img)?;
            if c > best.0 {
                best = (c, j);
            }
        }
        hits += (samples[best.1].class_ids == s.class_ids) as usize;
    }
    Ok(hits as f64 / samples.len().max(1) as f64)
}

/// Metrics of the prompt maps themselves used as predictions.
pub fn evaluate_prompts(samples: &[Sample], prompts: &[PromptMap], theta: f64) -> Result<MetricsReport> {
    let per_sample = samples
        .iter()
        .zip(prompts)
        .map(|(s, p)| SampleMetrics::score(s, &p.upsample(s.image.height, s.image.width), theta))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_samples(per_sample))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityBin {
    pub label: String,
    pub count: usize,
    pub mean_dice_prompt: f64,
    pub mean_dice_model: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelfEnhancement {
    /// `(dice of Φ, dice of model)` per sample.
    pub pairs: Vec<(f64, f64)>,
    /// Fraction of samples where the model is strictly better.
    pub fraction_above: f64,
    pub median_dice_prompt: f64,
    pub median_dice_model: f64,
    pub bins: Vec<QualityBin>,
}

pub fn self_enhancement_from_pairs(pairs: Vec<(f64, f64)>) -> SelfEnhancement {
    let n = pairs.len().max(1) as f64;
    let above = pairs.iter().filter(|(p, m)| m > p).count() as f64;
    let prompt: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let model: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let bin_of = |d: f64| if d < 0.3 { 0 } else if d <= 0.6 { 1 } else { 2 };
    let bins = ["<0.3", "0.3-0.6", ">0.6"]
        .iter()
        .enumerate()
        .map(|(b, label)| {
            let inside: Vec<&(f64, f64)> = pairs.iter().filter(|(p, _)| bin_of(*p) == b).collect();
            let c = inside.len().max(1) as f64;
            QualityBin {
                label: label.to_string(),
                count: inside.len(),
                mean_dice_prompt: inside.iter().map(|p| p.0).sum::<f64>() / c,
                mean_dice_model: inside.iter().map(|p| p.1).sum::<f64>() / c,
            }
        })
        .collect();
    SelfEnhancement {
        fraction_above: above / n,
        median_dice_prompt: math::median(&prompt),
        median_dice_model: math::median(&model),
        pairs,
        bins,
    }
}

/// Per-sample Dice of Φ (binarized at 0.3) against Dice of the model.
pub fn self_enhancement_report(model: &Model, samples: &[Sample], prompts: &[PromptMap], theta: f64) -> Result<SelfEnhancement> {
    let m = evaluate(model, samples, theta, false)?;
    let p = evaluate_prompts(samples, prompts, PROMPT_PREDICTION_THETA)?;
    let pairs = p.per_sample.iter().zip(&m.per_sample).map(|(a, b)| (a.dice, b.dice)).collect();
    Ok(self_enhancement_from_pairs(pairs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k_percent: f64,
    pub record: RunRecord,
}

/// Retrain from `baseline` with Φ corrupted at each level of `k_set` and
/// evaluate on `test`.
pub fn robustness_sweep(
    baseline: &Model,
    train: &[Sample],
    prompts: &[PromptMap],
    test: &[Sample],
    k_set: &[f64],
    config: &TrainConfig,
) -> Result<Vec<SweepPoint>> {
    k_set
        .iter()
        .map(|&k| {
            let corrupted: Vec<PromptMap> = prompts.iter().map(|p| corrupt_prompt(p, k)).collect();
            let mut model = baseline.clone();
            let mut record = train_dap(&mut model, train, Prompts::Cached(&corrupted), config)?;
            record.metrics = Some(evaluate(&model, test, config.theta, false)?);
            Ok(SweepPoint { k_percent: k, record })
        })
        .collect()
}

/// Ablation configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    GlobalOnly,
    PromptGlobal,
    LocalOnly,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::GlobalOnly, Ablation::PromptGlobal, Ablation::LocalOnly, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::GlobalOnly => "global-only",
            Ablation::PromptGlobal => "prompt+global",
            Ablation::LocalOnly => "local-only",
            Ablation::Full => "full",
        }
    }

    /// Adjust a full configuration to this row. The segmentation term stays
    /// on so every row produces grounding maps.
    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        match self {
            Ablation::GlobalOnly => {
                c.prompt.enabled = false;
                c.loss.w_lcl = 0.0;
            }
            Ablation::PromptGlobal => {
                c.prompt.enabled = true;
                c.loss.w_lcl = 0.0;
            }
            Ablation::LocalOnly => {
                c.prompt.enabled = false;
                c.loss.w_glb = 0.0;
            }
            Ablation::Full => c.prompt.enabled = true,
        }
        c
    }
}

impl core::str::FromStr for Ablation {
    type Err = DapError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| DapError::Config(format!("unknown ablation `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use alloc::vec;
    use super::*;
    use crate::model::tiny_config;
    use crate::synth::{generate_dataset, SynthConfig};

    fn tiny_data(n: usize) -> Vec<Sample> {
        let cfg = SynthConfig {
            image_size: 16,
            patch_size: 4,
            lesion_area_fraction: (0.05, 0.2),
            lesions_per_image: (1, 1),
            ..Default::default()
        };
        generate_dataset(&cfg, n).unwrap()
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn batches_cover_everything_once() {
        let b = batches(9, 4, 1, 0);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert!(b.iter().all(|x| x.len() >= 2));
    }

    #[test]
    fn pretraining_is_deterministic() {
        let data = tiny_data(8);
        let run = || {
            let mut m = Model::new(tiny_config(8, 1, 1)).unwrap();
            pretrain_baseline(&mut m, &data, &tiny_train()).unwrap()
        };
        assert_eq!(run().epochs, run().epochs);
    }

    #[test]
    fn cached_and_live_prompts_agree_at_step_zero() {
        let data = tiny_data(6);
        let base = Model::new(tiny_config(8, 2, 3)).unwrap();
        let cached = extract_prompts(&base, &data).unwrap();
        let cfg = tiny_train();
        let a = dap_initial_loss(&base, &data, Prompts::Cached(&cached), &cfg).unwrap();
        let b = dap_initial_loss(&base, &data, Prompts::OnTheFly(&base), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ablation_rows() {
        let c = TrainConfig::default();
        let g = Ablation::GlobalOnly.apply(&c);
        assert!(!g.prompt.enabled && g.loss.w_lcl == 0.0 && g.loss.w_glb == 1.0);
        let l = Ablation::LocalOnly.apply(&c);
        assert_eq!(l.loss.w_glb, 0.0);
        assert_eq!("full".parse::<Ablation>().unwrap(), Ablation::Full);
    }

    #[test]
    fn self_enhancement_ties_are_not_above() {
        let s = self_enhancement_from_pairs(vec![(0.5, 0.5), (0.2, 0.4), (0.7, 0.6), (0.1, 0.1)]);
        assert_eq!(s.fraction_above, 0.25);
        assert_eq!(s.bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 1, 1]);
    }

    #[test]
    fn config_presets() {
        assert_eq!(TrainConfig::default().batch_size, 64);
        assert_eq!(TrainConfig::default().lr, 1e-3);
        assert_eq!(TrainConfig::full_scale().batch_size, 512);
        assert_eq!(TrainConfig::full_scale().lr, 0.008);
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    }
}
