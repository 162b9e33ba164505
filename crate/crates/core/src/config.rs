//! Run configuration as flat `key = value` text with namespaced keys.
//!
//! Values are JSON scalars (`4`, `0.0004`, `true`, `"mamba-cross"`); bare
//! words are read as strings. Keys missing from a file keep their defaults,
//! unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backbone::BackboneConfig;
use crate::error::{config_err, Error, Result};
use crate::eval::EvalConfig;
use crate::head::HeadConfig;
use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use crate::temporal::{TemporalConfig, Variant};
use crate::train::{OptimConfig, TrainConfig};
use crate::world::{SamplerConfig, WorldConfig};

/// Everything under `train.*`: loop length, optimizer, clip sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Clips per batch unit (`n`). Frames per clip (`m`) is `temporal.window`.
    pub clips: usize,
    pub epochs: usize,
    pub clips_per_epoch: usize,
    pub accumulation: usize,
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_at: f64,
    pub decay_factor: f64,
    pub template_factor: f64,
    pub search_factor: f64,
    pub center_jitter: f64,
    pub scale_jitter_min: f64,
    pub scale_jitter_max: f64,
    pub brightness: f64,
    pub flip: bool,
    /// Write a checkpoint every this many epochs (and always at the end).
    pub checkpoint_every: usize,
    /// Seed of the generated training suite (when no dataset path is set).
    pub world_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let o = OptimConfig::default();
        let s = SamplerConfig::default();
        Self {
            clips: s.clips,
            epochs: t.epochs,
            clips_per_epoch: t.clips_per_epoch,
            accumulation: t.accumulation,
            lr_backbone: o.lr_backbone,
            lr_other: o.lr_other,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            decay_at: o.decay_at,
            decay_factor: o.decay_factor,
            template_factor: s.template_factor,
            search_factor: s.search_factor,
            center_jitter: s.center_jitter,
            scale_jitter_min: s.scale_jitter.0,
            scale_jitter_max: s.scale_jitter.1,
            brightness: s.brightness,
            flip: s.flip,
            checkpoint_every: 1,
            world_seed: 1,
        }
    }
}

/// `eval.*`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub use_prior: bool,
    pub template_factor: f64,
    pub search_factor: f64,
    /// Window override at inference; 0 keeps the trained window.
    pub window: usize,
    /// Seed of the generated evaluation suite (when no dataset path is set).
    pub world_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            use_prior: e.use_prior,
            template_factor: e.template_factor,
            search_factor: e.search_factor,
            window: e.window,
            world_seed: 7,
        }
    }
}

/// `model.*`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    pub track_token: bool,
    pub temporal_module: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            variant: m.variant,
            track_token: m.track_token,
            temporal_module: m.temporal_module,
        }
    }
}

/// `paths.*`; empty means "not set".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSection {
    /// Training sequences on disk; generated from `world.*` when empty.
    pub train_data: String,
    /// Evaluation sequences on disk; generated when empty.
    pub eval_data: String,
    pub checkpoint: String,
    pub out: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub backbone: BackboneConfig,
    pub temporal: TemporalConfig,
    pub head: HeadConfig,
    pub loss: LossWeights,
    pub world: WorldConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub paths: PathSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.world.validate()?;
        let s = self.sampler_config();
        s.validate()?;
        self.train_config().validate(&s)?;
        self.optim_config().validate(self.train.epochs)?;
        if !(self.eval.template_factor > 0.0 && self.eval.search_factor > 0.0) {
            return config_err("eval context factors must be positive");
        }
        if self.train.checkpoint_every == 0 {
            return config_err("train.checkpoint_every must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            temporal: self.temporal.clone(),
            head: self.head.clone(),
            loss: self.loss,
            variant: self.model.variant,
            track_token: self.model.track_token,
            temporal_module: self.model.temporal_module,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let t = &self.train;
        SamplerConfig {
            clips: t.clips,
            frames: self.temporal.window,
            template_factor: t.template_factor,
            search_factor: t.search_factor,
            center_jitter: t.center_jitter,
            scale_jitter: (t.scale_jitter_min, t.scale_jitter_max),
            brightness: t.brightness,
            flip: t.flip,
        }
    }

    pub fn optim_config(&self) -> OptimConfig {
        let t = &self.train;
        OptimConfig {
            lr_backbone: t.lr_backbone,
            lr_other: t.lr_other,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            decay_at: t.decay_at,
            decay_factor: t.decay_factor,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            clips_per_epoch: self.train.clips_per_epoch,
            accumulation: self.train.accumulation,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            use_prior: self.eval.use_prior,
            template_factor: self.eval.template_factor,
            search_factor: self.eval.search_factor,
            window: self.eval.window,
        }
    }

    /// Every key with its current value, sorted by key.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &v, &mut out);
        out.sort();
        out
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Defaults overridden by the lines of `text`. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    what: "config",
                    line: i + 1,
                    msg: format!("expected `key = value`, got {line:?}"),
                });
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        self.apply_pairs(&pairs)
    }

    /// Overrides single keys, as from the command line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.apply_pairs(&[(key.to_string(), value.to_string())])
    }

    fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        for (k, v) in pairs {
            insert(&mut tree, k, parse_value(v))?;
        }
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `a.b.c` in `tree`. Only keys that already exist are accepted, so a
/// typo fails here instead of being silently ignored.
fn insert(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map: &mut Map<String, Value> = match node {
            Value::Object(m) => m,
            _ => return config_err(format!("unknown config key {key:?}")),
        };
        let Some(child) = map.get_mut(*part) else {
            return config_err(format!("unknown config key {key:?}"));
        };
        if i + 1 == parts.len() {
            if child.is_object() {
                return config_err(format!("config key {key:?} names a section, not a value"));
            }
            // integers written as `4.0` are still integers
            *child = match (&*child, value) {
                (Value::Number(old), Value::Number(new)) if old.is_u64() && new.is_f64() => {
                    let f = new.as_f64().unwrap_or(f64::NAN);
                    if f.fract() == 0.0 && f >= 0.0 {
                        Value::from(f as u64)
                    } else {
                        return config_err(format!("config key {key:?} needs an integer, got {f}"));
                    }
                }
                (_, v) => v,
            };
            return Ok(());
        }
        node = child;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let mut c = RunConfig::default();
        c.train.lr_other = 0.1 + 0.2;
        c.seed = u64::MAX;
        c.model.variant = Variant::SelfSelf;
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(RunConfig::from_text("train.lr = 1").is_err());
        assert!(RunConfig::from_text("nonsense.key = 1").is_err());
        assert!(RunConfig::from_text("train = 1").is_err());
    }

    #[test]
    fn bare_words_and_overrides() {
        let c = RunConfig::from_text("model.variant = self-cross\nseed = 5 # comment\n").unwrap();
        assert_eq!(c.model.variant, Variant::SelfCross);
        assert_eq!(c.seed, 5);
        assert!(RunConfig::from_text("model.variant = mamba").is_err());
        assert!(RunConfig::from_text("seed = -1").is_err());
    }
}
