//! Run configuration as a flat JSON object of dotted keys.
//!
//! ```json
//! { "seed": 0, "model.vision.width": 32, "train.lr": 0.001, "prompt.layers": "last", "loss.w_lcl": 0.1 }
//! ```
//!
//! Nested objects are accepted too and flattened on load. Every key must
//! exist in the schema (see `dap <verb> --help`); missing keys take their
//! defaults. `seed` drives the generator, model initialization and batch
//! order, and is overridden by the `DAP_SEED` environment variable.

use std::collections::BTreeMap;
use std::path::Path;

use dap_core::model::ModelConfig;
use dap_core::synth::SynthConfig;
use dap_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{AppError, AppResult};
use crate::fsutil;

pub const SEED_ENV: &str = "DAP_SEED";

/// Keys owned by `seed` and hidden from the flat schema.
const SEED_OWNED_KEYS: [&str; 4] = ["synth.seed", "model.seed", "train.seed", "train.pretrain_temperature"];

/// Objective and prompt settings live under `train` internally but are
/// exposed as `loss.*` and `prompt.*`.
fn public_key(k: &str) -> String {
    for prefix in ["train.loss.", "train.contrastive."] {
        if let Some(rest) = k.strip_prefix(prefix) {
            return format!("loss.{rest}");
        }
    }
    match k.strip_prefix("train.prompt.") {
        Some(rest) => format!("prompt.{rest}"),
        None => k.to_string(),
    }
}

fn internal_key(k: &str) -> String {
    if let Some(rest) = k.strip_prefix("loss.") {
        if rest.starts_with("w_") {
            return format!("train.loss.{rest}");
        }
        return format!("train.contrastive.{rest}");
    }
    match k.strip_prefix("prompt.") {
        Some(rest) => format!("train.prompt.{rest}"),
        None => k.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub temperature: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 15, lr: 1e-3, temperature: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        let mut model = ModelConfig::default();
        model.vision.width = 32;
        model.text.width = 32;
        model.embed_dim = 32;
        let mut train = TrainConfig { epochs: 15, lr: 5e-4, ..TrainConfig::default() };
        train.prompt.binary_target = true;
        let mut c = Self {
            seed: 0,
            synth: SynthConfig::default(),
            model,
            pretrain: PretrainConfig::default(),
            train,
        };
        c.propagate();
        c
    }
}

impl AppConfig {
    /// Copies the shared seed and pretraining temperature into the module configs.
    fn propagate(&mut self) {
        self.synth.seed = self.seed;
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.train.pretrain_temperature = self.pretrain.temperature;
    }

    pub fn validate(&self) -> AppResult<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.vision.image_size != self.synth.image_size
            || self.model.vision.patch_size != self.synth.patch_size
            || self.model.vision.channels != self.synth.channels
        {
            return Err(AppError::Config(
                "model.vision image_size/patch_size/channels must match synth".into(),
            ));
        }
        if !(self.pretrain.lr > 0.0) {
            return Err(AppError::Config("pretrain.lr must be > 0".into()));
        }
        if !(self.pretrain.temperature > 0.0) {
            return Err(AppError::Config("pretrain.temperature must be > 0".into()));
        }
        self.train.prompt_layers(self.model.vision.depth)?;
        Ok(())
    }

    /// Training config for baseline pretraining.
    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig { epochs: self.pretrain.epochs, lr: self.pretrain.lr, ..self.train.clone() }
    }

    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut raw = BTreeMap::new();
        flatten("", serde_json::to_value(self).expect("config serializes"), &mut raw);
        for k in SEED_OWNED_KEYS {
            raw.remove(k);
        }
        raw.into_iter().map(|(k, v)| (public_key(&k), v)).collect()
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> AppResult<Self> {
        let schema = Self::default().to_flat();
        let mut merged = schema.clone();
        for (k, v) in flat {
            if !schema.contains_key(k) {
                return Err(AppError::Config(format!("unknown config key `{k}`")));
            }
            merged.insert(k.clone(), v.clone());
        }
        let merged = merged.into_iter().map(|(k, v)| (internal_key(&k), v)).collect();
        let mut c: Self = serde_json::from_value(unflatten(&merged))
            .map_err(|e| AppError::Config(e.to_string()))?;
        c.propagate();
        Ok(c)
    }

    /// Loads `path` (or the defaults), applies `key=value` overrides, then `DAP_SEED`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> AppResult<Self> {
        let mut flat = BTreeMap::new();
        if let Some(p) = path {
            let v: Value = fsutil::read_json(p).map_err(|e| match e {
                AppError::FormatAt { path, message } => {
                    AppError::Config(format!("{}: {message}", path.display()))
                }
                AppError::Io { path, source } => AppError::Config(format!("{}: {source}", path.display())),
                other => other,
            })?;
            if !v.is_object() {
                return Err(AppError::Config(format!("{}: expected a JSON object", p.display())));
            }
            flatten("", v, &mut flat);
        }
        for o in overrides {
            let (k, v) = parse_override(o)?;
            flat.insert(k, v);
        }
        if let Ok(s) = std::env::var(SEED_ENV) {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| AppError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            flat.insert("seed".into(), Value::from(seed));
        }
        let c = Self::from_flat(&flat)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        fsutil::write_json(path, &self.to_flat())
    }
}

/// `key=value`; the value is parsed as JSON and falls back to a plain string.
pub fn parse_override(s: &str) -> AppResult<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| AppError::Config(format!("override `{s}` is not key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(AppError::Config(format!("override `{s}` has an empty key")));
    }
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), v))
}

fn flatten(prefix: &str, v: Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf);
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (k, v) in flat {
        let mut node = &mut root;
        let mut parts = k.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), v.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("schema keys never collide with leaves");
            }
        }
    }
    Value::Object(root)
}

/// One `key = default` line per schema key, for `--help`.
pub fn schema_help() -> String {
    let mut s = String::from("Config keys (flat JSON object; defaults shown):\n");
    for (k, v) in AppConfig::default().to_flat() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str(&format!("\n{SEED_ENV} overrides `seed`.\n"));
    s
}
