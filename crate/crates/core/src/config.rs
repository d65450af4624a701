//! Run configuration and its flat `key = value` text form.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! e1 = 30
//! augment_factors = 0,2,5,10
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AdamConfig;
use crate::clusters::Gate;
use crate::losses::{DroMode, LossWeights};
use crate::net::NetConfig;
use crate::record_io::{AugmentFactors, BeatClass};
use crate::signal::PrepConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key}: invalid value {value:?}: {detail}")]
    BadValue { key: String, value: String, detail: String },
    #[error("config line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("config file {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeightMode {
    /// `N_total / (K * N_k)` on the augmented source.
    #[default]
    Inverse,
    Uniform,
}

impl FromStr for ClassWeightMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inverse" => Ok(Self::Inverse),
            "uniform" => Ok(Self::Uniform),
            _ => Err("expected inverse or uniform".into()),
        }
    }
}

impl ClassWeightMode {
    pub fn weights(self, counts: [usize; BeatClass::COUNT]) -> [f64; BeatClass::COUNT] {
        let total: usize = counts.iter().sum();
        match self {
            Self::Uniform => [1.0; BeatClass::COUNT],
            Self::Inverse => counts.map(|n| if n == 0 { 1.0 } else { total as f64 / (BeatClass::COUNT * n) as f64 }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Epochs of the pre-training, cluster and adaptation stages.
    pub epochs: [usize; 3],
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub weights: LossWeights,
    pub dro_mode: DroMode,
    pub dro_eta: f64,
    /// Recompute confident target predictions and `CC_t` after every
    /// adaptation epoch.
    pub refresh_target_centroids: bool,
    pub augment: AugmentFactors,
    pub class_weight_mode: ClassWeightMode,
    pub net: NetConfig,
    pub gate: Gate,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: [30, 10, 20],
            batch_size: 512,
            adam: AdamConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            dro_mode: DroMode::Max,
            dro_eta: 0.01,
            refresh_target_centroids: true,
            augment: AugmentFactors::default(),
            class_weight_mode: ClassWeightMode::Inverse,
            net: NetConfig::default(),
            gate: Gate::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.epochs.contains(&0) {
            return bad(format!("epochs {:?} must all be >= 1", self.epochs));
        }
        if self.batch_size < BeatClass::COUNT {
            return bad(format!("batch_size {} must be >= {}", self.batch_size, BeatClass::COUNT));
        }
        if !(self.adam.lr > 0.0) || self.adam.weight_decay < 0.0 {
            return bad("lr must be > 0 and weight_decay >= 0".into());
        }
        if self.net.channels.is_empty() || self.net.channels.contains(&0) || self.net.kernel % 2 == 0 {
            return bad("channels must be non-empty and positive, kernel odd".into());
        }
        if !(0.0..1.0).contains(&self.gate.min_prob) {
            return bad(format!("confidence {} must lie in [0, 1)", self.gate.min_prob));
        }
        self.weights.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

/// Everything a run needs: preprocessing, training and evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub prep: PrepConfig,
    pub train: TrainConfig,
    /// Evaluate on class-duplicated target data.
    pub eval_augment: bool,
    /// Also write `confusion.png`.
    pub heatmap: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self { prep: PrepConfig::default(), train: TrainConfig::default(), eval_augment: true, heatmap: false }
    }
}

/// Every accepted key, in the order [`Config::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "band_lo",
    "band_hi",
    "target_fs",
    "filter_order",
    "channel",
    "e1",
    "e2",
    "e3",
    "batch_size",
    "lr",
    "weight_decay",
    "seed",
    "alpha",
    "gamma1",
    "gamma2",
    "beta1",
    "beta2",
    "beta3",
    "beta4",
    "tm",
    "dro_mode",
    "dro_eta",
    "refresh_centroids",
    "augment_factors",
    "class_weights",
    "channels",
    "kernel",
    "hidden",
    "confidence",
    "augment",
    "heatmap",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue { key: key.into(), value: value.into(), detail: e.to_string() })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value.split(',').map(|v| parse::<usize>(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue { key: key.into(), value: value.into(), detail: "expected true or false".into() }),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Applies one setting. Keys may use `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let k = key.as_str();
        let p = &mut self.prep;
        let t = &mut self.train;
        match k {
            "band_lo" => p.band_lo = parse(k, value)?,
            "band_hi" => p.band_hi = parse(k, value)?,
            "target_fs" => p.target_fs = parse(k, value)?,
            "filter_order" => p.filter_order = parse(k, value)?,
            "channel" => p.channel = (!value.is_empty()).then(|| value.to_string()),
            "e1" => t.epochs[0] = parse(k, value)?,
            "e2" => t.epochs[1] = parse(k, value)?,
            "e3" => t.epochs[2] = parse(k, value)?,
            "batch_size" => t.batch_size = parse(k, value)?,
            "lr" => t.adam.lr = parse(k, value)?,
            "weight_decay" => t.adam.weight_decay = parse(k, value)?,
            "seed" => t.seed = parse(k, value)?,
            "alpha" => t.weights.alpha = parse(k, value)?,
            "gamma1" => t.weights.gamma1 = parse(k, value)?,
            "gamma2" => t.weights.gamma2 = parse(k, value)?,
            "beta1" => t.weights.beta1 = parse(k, value)?,
            "beta2" => t.weights.beta2 = parse(k, value)?,
            "beta3" => t.weights.beta3 = parse(k, value)?,
            "beta4" => t.weights.beta4 = parse(k, value)?,
            "tm" => t.weights.t_m = parse(k, value)?,
            "dro_mode" => t.dro_mode = parse(k, value)?,
            "dro_eta" => t.dro_eta = parse(k, value)?,
            "refresh_centroids" => t.refresh_target_centroids = parse_bool(k, value)?,
            "augment_factors" => {
                let v = parse_list(k, value)?;
                let arr: [usize; 4] = v.try_into().map_err(|_| ConfigError::BadValue {
                    key: k.into(),
                    value: value.into(),
                    detail: "expected four factors for N,V,S,F".into(),
                })?;
                t.augment = AugmentFactors(arr);
            }
            "class_weights" => t.class_weight_mode = parse(k, value)?,
            "channels" => t.net.channels = parse_list(k, value)?,
            "kernel" => t.net.kernel = parse(k, value)?,
            "hidden" => {
                let v = parse_list(k, value)?;
                t.net.hidden = v.try_into().map_err(|_| ConfigError::BadValue {
                    key: k.into(),
                    value: value.into(),
                    detail: "expected two widths".into(),
                })?;
            }
            "confidence" => t.gate.min_prob = parse(k, value)?,
            "augment" => self.eval_augment = parse_bool(k, value)?,
            "heatmap" => self.heatmap = parse_bool(k, value)?,
            _ => return Err(ConfigError::UnknownKey(key)),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.into() })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), detail: e.to_string() })?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.prep.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate()
    }

    /// All settings, one per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let (p, t, w) = (&self.prep, &self.train, &self.train.weights);
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("band_lo", p.band_lo.to_string());
        put("band_hi", p.band_hi.to_string());
        put("target_fs", p.target_fs.to_string());
        put("filter_order", p.filter_order.to_string());
        put("channel", p.channel.clone().unwrap_or_default());
        put("e1", t.epochs[0].to_string());
        put("e2", t.epochs[1].to_string());
        put("e3", t.epochs[2].to_string());
        put("batch_size", t.batch_size.to_string());
        put("lr", t.adam.lr.to_string());
        put("weight_decay", t.adam.weight_decay.to_string());
        put("seed", t.seed.to_string());
        put("alpha", w.alpha.to_string());
        put("gamma1", w.gamma1.to_string());
        put("gamma2", w.gamma2.to_string());
        put("beta1", w.beta1.to_string());
        put("beta2", w.beta2.to_string());
        put("beta3", w.beta3.to_string());
        put("beta4", w.beta4.to_string());
        put("tm", w.t_m.to_string());
        put("dro_mode", t.dro_mode.to_string());
        put("dro_eta", t.dro_eta.to_string());
        put("refresh_centroids", t.refresh_target_centroids.to_string());
        put("augment_factors", join(&t.augment.0));
        put("class_weights", format!("{:?}", t.class_weight_mode).to_lowercase());
        put("channels", join(&t.net.channels));
        put("kernel", t.net.kernel.to_string());
        put("hidden", join(&t.net.hidden));
        put("confidence", t.gate.min_prob.to_string());
        put("augment", self.eval_augment.to_string());
        put("heatmap", self.heatmap.to_string());
        s
    }
}
