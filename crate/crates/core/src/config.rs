//! Flat `key = value` run configuration.
//!
//! Every key has a default (see [`DEFAULTS`]); unknown keys are rejected.
//! Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::decoder::DecoderConfig;
use crate::mae::{EncoderConfig, FusionKind, SimilarityKind};
use crate::model::ModelConfig;
use crate::pillars::{Area, PillarConfig};
use crate::synthdata::ScenarioConfig;
use crate::tracker::{TemplateStrategy, TrackOptions};
use crate::training::{AdamWConfig, LossWeights, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("key {key}: cannot use {value:?} ({reason})")]
    Value { key: String, value: String, reason: String },
    #[error("ablation matrix is empty")]
    EmptyMatrix,
}

/// `(key, default, meaning)`.
pub const DEFAULTS: &[(&str, &str, &str)] = &[
    ("model.backbone", "desk-small", "backbone preset: desk-small or pvtv2-b2-paper"),
    ("model.pillar_channels", "16", "pillar feature width (the backbone input)"),
    ("model.template_scale", "0.5", "template area as a fraction of the search area"),
    ("pillar.area", "-3.2,-3.2,-3,3.2,3.2,1", "search area xmin,ymin,zmin,xmax,ymax,zmax (m)"),
    ("pillar.size", "0.1,0.1,4", "pillar size x,y,z (m); z must span the area"),
    ("pillar.max_points", "32", "points kept per pillar"),
    ("pillar.max_pillars", "4096", "non-empty pillars kept"),
    ("backbone.norm", "true", "layer normalization inside the backbone"),
    ("similarity", "attention", "attention, cosine, euclidean or xcorr"),
    ("fusion", "late", "late, early, c2 or c5"),
    ("encoder.width", "64", "encoder feature width"),
    ("encoder.heads", "8", "attention heads"),
    ("encoder.depth", "1", "attention blocks per similarity site"),
    ("encoder.ffn", "64", "feed-forward hidden width"),
    ("encoder.pos_enc", "true", "sinusoidal positional encoding"),
    ("decoder.k", "64", "top-k proposals"),
    ("decoder.two_stage", "true", "proposal stage before the query decoder"),
    ("decoder.heads", "8", "attention heads"),
    ("decoder.depth", "1", "decoder blocks"),
    ("decoder.ffn", "128", "feed-forward hidden width"),
    ("decoder.bands", "8", "sinusoid bands per proposal coordinate"),
    ("loss.cls", "2", "classification weight"),
    ("loss.l1", "5", "box L1 weight"),
    ("loss.stage_one_dense", "false", "stage-one targets are the foreground pixels"),
    ("train.steps", "1500", "optimizer steps"),
    ("train.batch", "4", "samples per step"),
    ("train.lr", "3e-4", "initial learning rate"),
    ("train.weight_decay", "0.05", "decoupled weight decay"),
    ("train.milestones", "1125", "steps where the rate drops (comma list, may be empty)"),
    ("train.gamma", "0.1", "rate factor at each milestone"),
    ("train.clip", "0", "gradient norm cap, 0 = off"),
    ("train.jitter", "0.3", "search-center jitter std (m)"),
    ("train.sequences", "20", "synthetic training sequences"),
    ("train.data", "", "sequence file; empty = synthesize"),
    ("train.data_seed", "0", "seed of the synthetic training set"),
    ("eval.sequences", "20", "synthetic evaluation sequences"),
    ("eval.data", "", "sequence file; empty = synthesize"),
    ("eval.data_seed", "0", "seed of the synthetic evaluation set; equal seeds and counts reuse the training set"),
    ("synth.frames", "10", "frames per sequence"),
    ("synth.points", "256", "target points per frame"),
    ("synth.clutter", "64", "clutter points per frame"),
    ("synth.velocity", "0.3", "mean speed (m/frame); speeds are drawn in [0, 2x]"),
    ("synth.yaw_rate", "0.05", "max yaw rate (rad/frame)"),
    ("synth.position_noise", "0.02", "position noise std (m)"),
    ("synth.yaw_noise", "0.01", "yaw noise std (rad)"),
    ("synth.occlusion", "false", "drop one visible side face"),
    ("tracker.strategy", "FP", "template strategy: F, P, FP or AP"),
    ("tracker.margin", "0.25", "template crop margin (m)"),
    ("sweep.counts", "8,16,32,64,128,256", "target point counts"),
    ("sweep.per_bucket", "30", "sequences per count"),
    ("ablate.variants", "similarity=attention | similarity=cosine", "`|`-separated variants of space-separated overrides"),
    ("ablate.seeds", "1", "seeds per variant"),
];

/// Keys that change the network's shape or meaning; they make up the hash.
const MODEL_PREFIXES: &[&str] = &["model.", "pillar.", "backbone.", "encoder.", "decoder.", "similarity", "fusion"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl FromStr for RunConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for RunConfig {
    /// The fully resolved configuration, one key per line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

fn bad(key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(ConfigError::UnknownKey(key.to_string())),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("no default for {key}"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| bad(key, v, e))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let v = self.get(key);
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| bad(key, v, e)))
            .collect()
    }

    fn array<const N: usize>(&self, key: &str) -> Result<[f64; N], ConfigError> {
        let v: Vec<f64> = self.list(key)?;
        v.try_into().map_err(|_| bad(key, self.get(key), format!("expected {N} numbers")))
    }

    /// Optional path: empty means none.
    pub fn path(&self, key: &str) -> Option<&str> {
        Some(self.get(key)).filter(|s| !s.is_empty())
    }

    /// Builds every typed section once so bad values surface at load time.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let model = self.model()?;
        model.validate().map_err(|e| bad("model", "", e))?;
        self.train(0)?;
        self.scenario()?;
        self.track()?;
        self.variants()?;
        let _: Vec<usize> = self.list("sweep.counts")?;
        let _: usize = self.parse("sweep.per_bucket")?;
        let _: usize = self.parse("ablate.seeds")?;
        Ok(())
    }

    pub fn model(&self) -> Result<ModelConfig, ConfigError> {
        let preset = self.get("model.backbone");
        let mut backbone = BackboneConfig::preset(preset).ok_or_else(|| bad("model.backbone", preset, "unknown preset"))?;
        backbone.norm = self.parse("backbone.norm")?;
        let search = PillarConfig {
            area: Area::from_array(self.array("pillar.area")?),
            pillar_size: self.array("pillar.size")?,
            max_points_per_pillar: self.parse("pillar.max_points")?,
            max_pillars: self.parse("pillar.max_pillars")?,
        };
        let similarity: SimilarityKind = self.parse("similarity")?;
        let fusion: FusionKind = self.parse("fusion")?;
        Ok(ModelConfig {
            search,
            template_scale: self.parse("model.template_scale")?,
            pillar_channels: self.parse("model.pillar_channels")?,
            backbone,
            encoder: EncoderConfig {
                width: self.parse("encoder.width")?,
                heads: self.parse("encoder.heads")?,
                depth: self.parse("encoder.depth")?,
                ffn_hidden: self.parse("encoder.ffn")?,
                pos_enc: self.parse("encoder.pos_enc")?,
                similarity,
                fusion,
            },
            decoder: DecoderConfig {
                k: self.parse("decoder.k")?,
                two_stage: self.parse("decoder.two_stage")?,
                heads: self.parse("decoder.heads")?,
                depth: self.parse("decoder.depth")?,
                ffn_hidden: self.parse("decoder.ffn")?,
                bands: self.parse("decoder.bands")?,
            },
        })
    }

    pub fn train(&self, seed: u64) -> Result<TrainConfig, ConfigError> {
        let loss = LossWeights {
            cls: self.parse("loss.cls")?,
            l1: self.parse("loss.l1")?,
        };
        if !(loss.cls >= 0.0 && loss.l1 >= 0.0) || loss.cls + loss.l1 == 0.0 {
            return Err(bad("loss.cls", self.get("loss.cls"), "weights must be nonnegative and not both zero"));
        }
        let jitter: f64 = self.parse("train.jitter")?;
        if !(jitter >= 0.0) {
            return Err(bad("train.jitter", self.get("train.jitter"), "must be nonnegative"));
        }
        Ok(TrainConfig {
            batch_size: self.parse("train.batch")?,
            optim: AdamWConfig {
                lr: self.parse("train.lr")?,
                weight_decay: self.parse("train.weight_decay")?,
                milestones: self.list("train.milestones")?,
                gamma: self.parse("train.gamma")?,
                ..Default::default()
            },
            loss,
            stage_one_dense: self.parse("loss.stage_one_dense")?,
            clip_norm: self.parse("train.clip")?,
            search_jitter: jitter,
            template_margin: self.parse("tracker.margin")?,
            template_strategy: self.parse::<TemplateStrategy>("tracker.strategy")?,
            seed,
        })
    }

    pub fn scenario(&self) -> Result<ScenarioConfig, ConfigError> {
        let s = ScenarioConfig {
            n_frames: self.parse("synth.frames")?,
            velocity: self.parse("synth.velocity")?,
            yaw_rate: self.parse("synth.yaw_rate")?,
            position_noise: self.parse("synth.position_noise")?,
            yaw_noise: self.parse("synth.yaw_noise")?,
            points_on_target: self.parse("synth.points")?,
            clutter_points: self.parse("synth.clutter")?,
            occlusion: self.parse("synth.occlusion")?,
            ..Default::default()
        };
        s.validate().map_err(|e| bad("synth", "", e))?;
        Ok(s)
    }

    pub fn track(&self) -> Result<TrackOptions, ConfigError> {
        Ok(TrackOptions {
            search_area: Area::from_array(self.array("pillar.area")?),
            template_margin: self.parse("tracker.margin")?,
            strategy: self.parse("tracker.strategy")?,
        })
    }

    /// Ablation variants, each a list of `(key, value)` overrides.
    pub fn variants(&self) -> Result<Vec<Vec<(String, String)>>, ConfigError> {
        let spec = self.get("ablate.variants");
        let mut out = Vec::new();
        for v in spec.split('|').map(str::trim).filter(|s| !s.is_empty()) {
            let mut overrides = Vec::new();
            for kv in v.split_whitespace() {
                let (k, val) = kv.split_once('=').ok_or_else(|| bad("ablate.variants", spec, format!("{kv:?} is not key=value")))?;
                if !self.values.contains_key(k) {
                    return Err(ConfigError::UnknownKey(k.to_string()));
                }
                overrides.push((k.to_string(), val.to_string()));
            }
            out.push(overrides);
        }
        Ok(out)
    }

    /// This configuration with `overrides` applied and revalidated.
    pub fn with(&self, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut c = self.clone();
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// SHA-256 over the model-defining keys; checkpoints carry it.
    pub fn model_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if MODEL_PREFIXES.iter().any(|p| k.starts_with(p)) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// The resolved configuration as a JSON object.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(self.values.iter().map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone()))).collect())
    }
}
