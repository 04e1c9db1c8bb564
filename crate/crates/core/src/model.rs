//! Two-tower vision-language model.
//!
//! Both towers are pre-norm transformers with a learned global slot at
//! position 0 ([IMG] for images, [CLS] for text) and a final projection into
//! a shared embedding space. Every token of the image tower is projected,
//! so patch tokens, [IMG] and [CLS] are directly comparable by cosine.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoder::{Decoder, DecoderConfig};
use crate::error::{DapError, Result};
use crate::math;
use crate::params::{Bound, Init, ParamBuilder, ParamId, ParamStore};
use crate::prompting::{self, PromptLayers};
use crate::relevance::PromptMap;
use crate::synth::{Image, MAX_TEXT_LEN};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionEncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Learned positional embeddings; disabling them makes the tower
    /// equivariant to patch permutations.
    pub pos_embed: bool,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 2,
            patch_size: 8,
            image_size: 64,
            channels: 1,
            pos_embed: true,
        }
    }
}

impl VisionEncoderConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(DapError::Config("vision.depth must be >= 1".to_string()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(DapError::Config("vision.width must be divisible by vision.heads".to_string()));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(DapError::Config("vision.image_size must be divisible by vision.patch_size".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 64,
            heads: 4,
            mlp_ratio: 2,
            vocab_size: 64,
            max_len: MAX_TEXT_LEN,
        }
    }
}

impl TextEncoderConfig {
    fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(DapError::Config("text.depth must be >= 1".to_string()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(DapError::Config("text.width must be divisible by text.heads".to_string()));
        }
        if self.max_len == 0 || self.max_len > MAX_TEXT_LEN {
            return Err(DapError::Config(format!("text.max_len must be in 1..={MAX_TEXT_LEN}")));
        }
        if self.vocab_size < 2 {
            return Err(DapError::Config("text.vocab_size must cover the reserved tokens".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vision: VisionEncoderConfig,
    pub text: TextEncoderConfig,
    pub decoder: DecoderConfig,
    /// Width of the shared image-text space.
    pub embed_dim: usize,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vision: VisionEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            decoder: DecoderConfig::default(),
            embed_dim: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        self.decoder.validate(self.vision.patch_size)?;
        if self.embed_dim == 0 {
            return Err(DapError::Config("embed_dim must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// `x·W + b`
#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let std = 1.0 / math::sqrt(fan_in as f64);
        let w = pb.add(format!("{name}.w"), fan_in, fan_out, Init::Normal(std));
        let b = bias.then(|| pb.add(format!("{name}.b"), 1, fan_out, Init::Zeros));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w));
        match self.b {
            Some(b) => g.add_row(y, p.var(b)),
            None => y,
        }
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    pub fn new(pb: &mut ParamBuilder, name: &str, width: usize) -> Self {
        Self {
            gain: pb.add(format!("{name}.gain"), 1, width, Init::Ones),
            bias: pb.add(format!("{name}.bias"), 1, width, Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let n = g.layer_norm(x);
        let n = g.mul_row(n, p.var(self.gain));
        g.add_row(n, p.var(self.bias))
    }
}

/// Graph handles recorded for one transformer layer.
#[derive(Clone, Debug)]
pub struct LayerVars {
    /// Residual-stream input of the layer, after any prompt scaling.
    pub input: Var,
    /// Per-head attention probabilities (`tokens × tokens`).
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    width: usize,
}

impl Block {
    fn new(pb: &mut ParamBuilder, name: &str, width: usize, heads: usize, mlp_ratio: usize) -> Self {
        let hidden = width * mlp_ratio.max(1);
        Self {
            ln1: Norm::new(pb, &format!("{name}.ln1"), width),
            qkv: Linear::new(pb, &format!("{name}.qkv"), width, 3 * width, true),
            proj: Linear::new(pb, &format!("{name}.proj"), width, width, true),
            ln2: Norm::new(pb, &format!("{name}.ln2"), width),
            fc1: Linear::new(pb, &format!("{name}.fc1"), width, hidden, true),
            fc2: Linear::new(pb, &format!("{name}.fc2"), hidden, width, true),
            heads,
            width,
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, track_attention: bool) -> (Var, Vec<Var>) {
        let dh = self.width / self.heads;
        let h = self.ln1.forward(g, p, x);
        let qkv = self.qkv.forward(g, p, h);
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = g.slice_cols(qkv, head * dh, dh);
            let k = g.slice_cols(qkv, self.width + head * dh, dh);
            let v = g.slice_cols(qkv, 2 * self.width + head * dh, dh);
            let scores = g.matmul_t(q, k);
            let scores = g.scale(scores, scale);
            let a = g.softmax(scores);
            if track_attention {
                g.track(a);
            }
            attention.push(a);
            outs.push(g.matmul(a, v));
        }
        let o = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let o = self.proj.forward(g, p, o);
        let x = g.add(x, o);
        let h = self.ln2.forward(g, p, x);
        let m = self.fc1.forward(g, p, h);
        let m = g.gelu(m);
        let m = self.fc2.forward(g, p, m);
        (g.add(x, m), attention)
    }
}

/// Output of an image-tower pass inside a graph.
#[derive(Clone, Debug)]
pub struct ImageForward {
    /// Projected tokens, `(1 + n) × embed_dim`; row 0 is [IMG].
    pub tokens: Var,
    pub layers: Vec<LayerVars>,
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    config: VisionEncoderConfig,
    patch_embed: Linear,
    global_slot: ParamId,
    pos: Option<ParamId>,
    blocks: Vec<Block>,
    ln_final: Norm,
    proj: Linear,
}

impl VisionEncoder {
    fn new(pb: &mut ParamBuilder, config: &VisionEncoderConfig, embed_dim: usize) -> Self {
        let patch_dim = config.channels * config.patch_size * config.patch_size;
        let n = config.num_patches();
        Self {
            config: config.clone(),
            patch_embed: Linear::new(pb, "vision.patch_embed", patch_dim, config.width, true),
            global_slot: pb.add("vision.img_slot".to_string(), 1, config.width, Init::Normal(0.02)),
            pos: config
                .pos_embed
                .then(|| pb.add("vision.pos".to_string(), n + 1, config.width, Init::Normal(0.02))),
            blocks: (0..config.depth)
                .map(|l| Block::new(pb, &format!("vision.block{l}"), config.width, config.heads, config.mlp_ratio))
                .collect(),
            ln_final: Norm::new(pb, "vision.ln_final", config.width),
            proj: Linear::new(pb, "vision.proj", config.width, embed_dim, false),
        }
    }

    pub fn config(&self) -> &VisionEncoderConfig {
        &self.config
    }

    /// Token embeddings entering layer 1: `[slot; patches·W + b] + pos`.
    fn embed(&self, g: &mut Graph, p: &Bound, patches: Var) -> Var {
        let e = self.patch_embed.forward(g, p, patches);
        let x = g.concat_rows(&[p.var(self.global_slot), e]);
        match self.pos {
            Some(pos) => g.add(x, p.var(pos)),
            None => x,
        }
    }

    /// Run layers `from..depth` (0-based) on the residual stream `x`,
    /// scaling patch rows by `prompt` before each listed layer.
    fn run_layers(
        &self,
        g: &mut Graph,
        p: &Bound,
        mut x: Var,
        from: usize,
        prompt: Option<(&[f64], &PromptLayers)>,
        track_attention: bool,
        layers: &mut Vec<LayerVars>,
    ) -> Var {
        for (l, block) in self.blocks.iter().enumerate().skip(from) {
            if let Some((weights, set)) = prompt {
                if set.contains(l + 1) {
                    x = prompting::apply_prompt_var(g, x, weights);
                }
            }
            let (next, attention) = block.forward(g, p, x, track_attention);
            layers.push(LayerVars { input: x, attention });
            x = next;
        }
        x
    }

    fn head(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let x = self.ln_final.forward(g, p, x);
        self.proj.forward(g, p, x)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        patches: Var,
        prompt: Option<(&[f64], &PromptLayers)>,
        track_attention: bool,
    ) -> ImageForward {
        let x = self.embed(g, p, patches);
        let mut layers = Vec::with_capacity(self.blocks.len());
        let x = self.run_layers(g, p, x, 0, prompt, track_attention, &mut layers);
        ImageForward {
            tokens: self.head(g, p, x),
            layers,
        }
    }

    /// Unprompted and prompted passes sharing every layer below the first
    /// prompted one.
    pub fn forward_pair(
        &self,
        g: &mut Graph,
        p: &Bound,
        patches: Var,
        weights: &[f64],
        set: &PromptLayers,
    ) -> (ImageForward, ImageForward) {
        let first = set.first_layer().map_or(self.blocks.len(), |l| l - 1).min(self.blocks.len());
        let x = self.embed(g, p, patches);
        let mut shared = Vec::with_capacity(self.blocks.len());
        let x = self.run_layers(g, p, x, 0, None, false, &mut shared);
        // `run_layers` above ran every layer; rerun the tail for each branch
        // from the residual stream at `first`.
        let branch_input = if first < shared.len() { shared[first].input } else { x };
        let prefix: Vec<LayerVars> = shared[..first].to_vec();

        let unprompted_tokens = self.head(g, p, x);
        let unprompted = ImageForward {
            tokens: unprompted_tokens,
            layers: shared,
        };

        let mut layers = prefix;
        let xp = self.run_layers(g, p, branch_input, first, Some((weights, set)), false, &mut layers);
        let prompted = ImageForward {
            tokens: self.head(g, p, xp),
            layers,
        };
        (unprompted, prompted)
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: TextEncoderConfig,
    token_embed: ParamId,
    cls_slot: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_final: Norm,
    proj: Linear,
}

impl TextEncoder {
    fn new(pb: &mut ParamBuilder, config: &TextEncoderConfig, embed_dim: usize) -> Self {
        Self {
            config: config.clone(),
            token_embed: pb.add("text.token_embed".to_string(), config.vocab_size, config.width, Init::Normal(0.5)),
            cls_slot: pb.add("text.cls_slot".to_string(), 1, config.width, Init::Normal(0.02)),
            pos: pb.add("text.pos".to_string(), config.max_len + 1, config.width, Init::Normal(0.02)),
            blocks: (0..config.depth)
                .map(|l| Block::new(pb, &format!("text.block{l}"), config.width, config.heads, config.mlp_ratio))
                .collect(),
            ln_final: Norm::new(pb, "text.ln_final", config.width),
            proj: Linear::new(pb, "text.proj", config.width, embed_dim, false),
        }
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.max_len {
            return Err(DapError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(DapError::Config(format!(
                "token id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// [CLS] embedding (`1 × embed_dim`) for one token sequence.
    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: &[u32]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let w = self.config.width;
        let len = tokens.len();
        let x = if len == 0 {
            p.var(self.cls_slot)
        } else {
            let index = tokens
                .iter()
                .flat_map(|&t| (0..w).map(move |j| t as usize * w + j))
                .collect();
            let emb = g.gather(p.var(self.token_embed), index, len, w);
            g.concat_rows(&[p.var(self.cls_slot), emb])
        };
        let pos = g.slice_rows(p.var(self.pos), 0, len + 1);
        let mut x = g.add(x, pos);
        for block in &self.blocks {
            x = block.forward(g, p, x, false).0;
        }
        let cls = g.slice_rows(x, 0, 1);
        let cls = self.ln_final.forward(g, p, cls);
        Ok(self.proj.forward(g, p, cls))
    }
}

/// Encoder outputs for one image, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBundle {
    pub img_token: Vec<f64>,
    /// `n × embed_dim`, row-major over the patch grid.
    pub patch_tokens: Tensor,
    pub grid_shape: (usize, usize),
    pub layer_trace: Option<Vec<LayerTrace>>,
}

impl TokenBundle {
    pub fn num_patches(&self) -> usize {
        self.patch_tokens.rows()
    }
}

/// Per-layer record of an image-tower pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// Residual-stream tokens entering the layer, `(1 + n) × width`.
    pub tokens: Tensor,
    /// Attention probabilities per head, `(1 + n) × (1 + n)`.
    pub attention: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub cls_token: Vec<f64>,
}

/// The full grounding model: both towers plus the pixel decoder.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut pb = ParamBuilder::fresh(&mut rng);
        let (vision, text, decoder) = Self::layout(&mut pb, &config);
        Ok(Self {
            params: pb.finish()?,
            config,
            vision,
            text,
            decoder,
        })
    }

    /// Rebuild a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::from_store(params);
        let (vision, text, decoder) = Self::layout(&mut pb, &config);
        Ok(Self {
            params: pb.finish()?,
            config,
            vision,
            text,
            decoder,
        })
    }

    fn layout(pb: &mut ParamBuilder, config: &ModelConfig) -> (VisionEncoder, TextEncoder, Decoder) {
        let vision = VisionEncoder::new(pb, &config.vision, config.embed_dim);
        let text = TextEncoder::new(pb, &config.text, config.embed_dim);
        let decoder = Decoder::new(pb, &config.decoder, config.embed_dim, config.vision.patch_size);
        (vision, text, decoder)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        let s = self.config.vision.grid_side();
        (s, s)
    }

    /// Flatten an image into `n × (channels·patch²)` patch rows.
    pub fn patches(&self, image: &Image) -> Result<Tensor> {
        let cfg = &self.config.vision;
        if image.height != cfg.image_size || image.width != cfg.image_size || image.channels != cfg.channels {
            return Err(DapError::Dimension {
                context: "image size",
                expected: cfg.channels * cfg.image_size * cfg.image_size,
                actual: image.channels * image.height * image.width,
            });
        }
        Ok(image_to_patches(image, cfg.patch_size))
    }

    /// Image-tower pass. With a prompt, patch tokens entering every layer of
    /// `prompt_layers` are scaled by the prompt weights; [IMG] never is.
    pub fn encode_image(
        &self,
        image: &Image,
        prompt: Option<&PromptMap>,
        prompt_layers: &PromptLayers,
    ) -> Result<TokenBundle> {
        self.encode_image_traced(image, prompt, prompt_layers, false)
    }

    pub fn encode_image_traced(
        &self,
        image: &Image,
        prompt: Option<&PromptMap>,
        prompt_layers: &PromptLayers,
        with_trace: bool,
    ) -> Result<TokenBundle> {
        let patches = self.patches(image)?;
        if let Some(pm) = prompt {
            self.check_prompt(pm)?;
        }
        prompt_layers.validate(self.config.vision.depth)?;
        let mut g = Graph::new();
        let p = self.params.bind_constants(&mut g);
        let x = g.constant(patches);
        let weights = prompt.map(|pm| pm.weights.data().to_vec());
        let fwd = self.vision.forward(
            &mut g,
            &p,
            x,
            weights.as_deref().map(|w| (w, prompt_layers)),
            false,
        );
        let trace = with_trace.then(|| {
            fwd.layers
                .iter()
                .map(|l| LayerTrace {
                    tokens: g.value(l.input).clone(),
                    attention: l.attention.iter().map(|a| g.value(*a).clone()).collect(),
                })
                .collect()
        });
        Ok(self.bundle_from(g.value(fwd.tokens), trace))
    }

    pub(crate) fn check_prompt(&self, pm: &PromptMap) -> Result<()> {
        let n = self.config.vision.num_patches();
        if pm.weights.len() != n {
            return Err(DapError::Dimension {
                context: "prompt map vs patch grid",
                expected: n,
                actual: pm.weights.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn bundle_from(&self, tokens: &Tensor, trace: Option<Vec<LayerTrace>>) -> TokenBundle {
        let e = tokens.cols();
        let n = tokens.rows() - 1;
        let patch_tokens = Tensor::from_vec(n, e, tokens.data()[e..].to_vec()).expect("shape");
        TokenBundle {
            img_token: tokens.row(0).to_vec(),
            patch_tokens,
            grid_shape: self.grid_shape(),
            layer_trace: trace,
        }
    }

    pub fn encode_text(&self, tokens: &[u32]) -> Result<TextEmbedding> {
        let mut g = Graph::new();
        let p = self.params.bind_constants(&mut g);
        let cls = self.text.forward(&mut g, &p, tokens)?;
        Ok(TextEmbedding {
            cls_token: g.value(cls).data().to_vec(),
        })
    }
}

pub fn image_to_patches(image: &Image, patch: usize) -> Tensor {
    let side = image.height / patch;
    let cols = image.width / patch;
    let dim = image.channels * patch * patch;
    let mut out = Tensor::zeros(side * cols, dim);
    for r in 0..side {
        for c in 0..cols {
            let row = out.row_mut(r * cols + c);
            let mut k = 0;
            for ch in 0..image.channels {
                for dy in 0..patch {
                    for dx in 0..patch {
                        row[k] = image.at(ch, r * patch + dy, c * patch + dx) as f64;
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Cosine similarity of two non-zero vectors.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DapError::Dimension {
            context: "cosine similarity",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (math::norm(a), math::norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(DapError::ZeroVector);
    }
    Ok((math::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Euclidean norm of every patch token, laid out on the patch grid.
pub fn patch_norm_map(bundle: &TokenBundle) -> Tensor {
    let (rows, cols) = bundle.grid_shape;
    let data = (0..bundle.patch_tokens.rows())
        .map(|i| math::norm(bundle.patch_tokens.row(i)))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("grid shape matches patch count")
}

/// Small configuration used by gradient checks and oracle tests.
pub fn tiny_config(width: usize, depth: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vision: VisionEncoderConfig {
            depth,
            width,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 4,
            image_size: 16,
            channels: 1,
            pos_embed: true,
        },
        text: TextEncoderConfig {
            depth: 1,
            width,
            heads: 2,
            mlp_ratio: 2,
            vocab_size: 64,
            max_len: MAX_TEXT_LEN,
        },
        decoder: DecoderConfig {
            hidden_channels: 4,
            first_stride: 2,
        },
        embed_dim: width,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::synth::{generate_dataset, SynthConfig};

    fn tiny_image(seed: u64) -> Image {
        let cfg = SynthConfig {
            image_size: 16,
            patch_size: 4,
            lesion_area_fraction: (0.05, 0.2),
            lesions_per_image: (1, 1),
            seed,
            ..Default::default()
        };
        generate_dataset(&cfg, 1).unwrap().remove(0).image
    }

    #[test]
    fn default_image_gives_64_patches_plus_global() {
        let model = Model::new(ModelConfig::default()).unwrap();
        let img = generate_dataset(&SynthConfig::default(), 1).unwrap().remove(0).image;
        let b = model.encode_image(&img, None, &PromptLayers::last(4)).unwrap();
        assert_eq!(b.patch_tokens.rows(), 64);
        assert_eq!(b.grid_shape, (8, 8));
        assert_eq!(b.img_token.len(), 64);
    }

    #[test]
    fn unit_prompt_is_identity_at_any_layer_set() {
        let model = Model::new(tiny_config(16, 2, 3)).unwrap();
        let img = tiny_image(1);
        let plain = model.encode_image(&img, None, &PromptLayers::last(2)).unwrap();
        let ones = PromptMap::uniform(4, 4);
        for set in [PromptLayers::last(2), PromptLayers::full(2), PromptLayers::first()] {
            let prompted = model.encode_image(&img, Some(&ones), &set).unwrap();
            assert!(prompted.patch_tokens.max_abs_diff(&plain.patch_tokens) < 1e-6);
            let d = prompted.img_token.iter().zip(&plain.img_token).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-6);
        }
    }

    #[test]
    fn encoders_are_deterministic() {
        let model = Model::new(tiny_config(16, 2, 3)).unwrap();
        let img = tiny_image(2);
        let a = model.encode_image(&img, None, &PromptLayers::last(2)).unwrap();
        let b = model.encode_image(&img, None, &PromptLayers::last(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(model.encode_text(&[2, 3, 4]).unwrap(), model.encode_text(&[2, 3, 4]).unwrap());
    }

    #[test]
    fn prompt_shape_mismatch_is_rejected() {
        let model = Model::new(tiny_config(16, 1, 3)).unwrap();
        let bad = PromptMap::uniform(3, 3);
        let err = model.encode_image(&tiny_image(1), Some(&bad), &PromptLayers::last(1)).unwrap_err();
        assert!(matches!(err, DapError::Dimension { .. }));
    }

    #[test]
    fn text_encoder_edge_cases() {
        let model = Model::new(tiny_config(16, 1, 5)).unwrap();
        let empty = model.encode_text(&[]).unwrap();
        assert!(empty.cls_token.iter().all(|v| v.is_finite()));
        assert!(empty.cls_token.iter().any(|&v| v != 0.0));
        let long = vec![2u32; MAX_TEXT_LEN + 1];
        assert!(matches!(model.encode_text(&long), Err(DapError::SequenceTooLong { .. })));
        let a = model.encode_text(&[2, 3, 4]).unwrap();
        let b = model.encode_text(&[5, 6]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn cosine_fixtures() {
        let u = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_sim(&u, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(DapError::ZeroVector));
        assert!((cosine_sim(&u, &[1.0, 2.0, 3.0]).unwrap() - cosine_sim(&[1.0, 2.0, 3.0], &u).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn norm_map_fixtures() {
        let mut tokens = Tensor::zeros(4, 3);
        tokens.row_mut(1).copy_from_slice(&[3.0, 4.0, 0.0]);
        let bundle = TokenBundle {
            img_token: vec![1.0, 0.0, 0.0],
            patch_tokens: tokens,
            grid_shape: (2, 2),
            layer_trace: None,
        };
        let map = patch_norm_map(&bundle);
        assert_eq!(map.shape(), (2, 2));
        assert_eq!(map.get(0, 0), 0.0);
        assert_eq!(map.get(0, 1), 5.0);
    }

    #[test]
    fn patch_permutation_permutes_outputs_without_positions() {
        let mut cfg = tiny_config(16, 1, 9);
        cfg.vision.pos_embed = false;
        let model = Model::new(cfg).unwrap();
        let img = tiny_image(4);
        let patches = model.patches(&img).unwrap();
        let n = patches.rows();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut permuted = Tensor::zeros(n, patches.cols());
        for (i, &j) in perm.iter().enumerate() {
            permuted.row_mut(i).copy_from_slice(patches.row(j));
        }
        let run = |x: Tensor| {
            let mut g = Graph::new();
            let p = model.params.bind_constants(&mut g);
            let xv = g.constant(x);
            let f = model.vision.forward(&mut g, &p, xv, None, false);
            g.value(f.tokens).clone()
        };
        let a = run(patches);
        let b = run(permuted);
        for (i, &j) in perm.iter().enumerate() {
            for c in 0..a.cols() {
                assert!((b.get(1 + i, c) - a.get(1 + j, c)).abs() < 1e-10);
            }
        }
        for c in 0..a.cols() {
            assert!((a.get(0, c) - b.get(0, c)).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_pair_matches_separate_passes() {
        let model = Model::new(tiny_config(16, 3, 2)).unwrap();
        let img = tiny_image(5);
        let weights: Vec<f64> = (0..16).map(|i| (i as f64) / 15.0).collect();
        let pm = PromptMap::from_weights(4, 4, weights.clone()).unwrap();
        for set in [PromptLayers::last(3), PromptLayers::full(3), PromptLayers::last_half(3)] {
            let plain = model.encode_image(&img, None, &set).unwrap();
            let prompted = model.encode_image(&img, Some(&pm), &set).unwrap();
            let mut g = Graph::new();
            let p = model.params.bind_constants(&mut g);
            let x = g.constant(model.patches(&img).unwrap());
            let (u, pr) = model.vision.forward_pair(&mut g, &p, x, &weights, &set);
            let ub = model.bundle_from(g.value(u.tokens), None);
            let pb = model.bundle_from(g.value(pr.tokens), None);
            assert!(ub.patch_tokens.max_abs_diff(&plain.patch_tokens) < 1e-12);
            assert!(pb.patch_tokens.max_abs_diff(&prompted.patch_tokens) < 1e-12);
        }
    }

    #[test]
    fn checkpoint_layout_round_trips_through_params() {
        let model = Model::new(tiny_config(8, 1, 1)).unwrap();
        let again = Model::from_params(model.config().clone(), &model.params).unwrap();
        assert_eq!(again.params, model.params);
        let mut other = tiny_config(8, 2, 1);
        other.seed = 1;
        assert!(Model::from_params(other, &model.params).is_err());
    }
}
