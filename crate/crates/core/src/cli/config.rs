//! Flat JSON run configuration: defaults, then the file, then `key=value`
//! overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::mva::{FinetuneOptions, LossScope, MaskSettings, ModelConfig, Phase, PretrainOptions, TrainConfig};
use crate::rero::{MetricKind, SelectionOrder, PAIR_PRODUCT};
use crate::videodata::ChannelNorm;

/// Tolerance on `rho_pre * rho_post` in pre-training.
pub const RATIO_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phase: Phase,
    pub seed: u64,

    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub tau: usize,
    pub patch: usize,
    pub stride: usize,

    pub rho_pre: f64,
    pub rho_post: f64,
    pub rho_pre_ft: f64,
    pub allow_ratio_override: bool,
    pub metric: MetricKind,
    pub order: SelectionOrder,
    pub alpha: f64,
    pub smoothing: bool,
    pub loss_scope: LossScope,
    pub normalize_target: bool,

    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,

    pub base_lr: f64,
    pub beta1: f64,
    /// 0.95 when pre-training and 0.999 when fine-tuning unless set.
    pub beta2: Option<f64>,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// When set, replaces `total_steps` with `ceil(epochs * clips / batch_size)`.
    pub epochs: Option<f64>,
    /// When set, replaces `warmup_steps` the same way.
    pub warmup_epochs: Option<f64>,
    pub batch_size: usize,
    pub loss_norm: u32,

    pub manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Pre-trained weights for fine-tuning.
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::pretrain();
        let mask = MaskSettings::default();
        Self {
            phase: Phase::Pretrain,
            seed: 0,
            channels: m.channels,
            height: m.height,
            width: m.width,
            tau: m.tau,
            patch: m.patch,
            stride: 1,
            rho_pre: mask.rho_pre,
            rho_post: mask.rho_post,
            rho_pre_ft: 0.6,
            allow_ratio_override: false,
            metric: mask.metric,
            order: SelectionOrder::Descending,
            alpha: 1.5,
            smoothing: true,
            loss_scope: mask.scope,
            normalize_target: mask.normalize_target,
            enc_dim: m.enc_dim,
            enc_depth: m.enc_depth,
            enc_heads: m.enc_heads,
            dec_dim: m.dec_dim,
            dec_depth: m.dec_depth,
            dec_heads: m.dec_heads,
            mlp_ratio: m.mlp_ratio,
            num_classes: m.num_classes,
            base_lr: t.base_lr,
            beta1: t.beta1,
            beta2: None,
            weight_decay: t.weight_decay,
            warmup_steps: t.warmup_steps,
            total_steps: t.total_steps,
            epochs: None,
            warmup_epochs: None,
            batch_size: t.batch_size,
            loss_norm: t.loss_norm,
            manifest: None,
            test_manifest: None,
            checkpoint: None,
            out: None,
        }
    }
}

/// One violated constraint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("{} constraint(s) violated", .0.len())]
    Invalid(Vec<Violation>),
}

impl ConfigError {
    /// Machine-readable form printed on rejection.
    pub fn to_json(&self) -> Value {
        match self {
            ConfigError::Invalid(v) => serde_json::json!({ "error": "invalid_config", "violations": v }),
            other => serde_json::json!({ "error": "config_parse", "message": other.to_string() }),
        }
    }
}

fn parse_override(item: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| ConfigError::Parse(format!("override '{item}' is not key=value")))?;
    let key = key.trim().replace('-', "_");
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key, value))
}

/// Merges `overlay` into `base`, reporting keys `base` does not have.
fn merge(base: &mut Map<String, Value>, overlay: Map<String, Value>, source: &str) -> Vec<Violation> {
    let mut unknown = Vec::new();
    for (k, v) in overlay {
        if base.contains_key(&k) {
            base.insert(k, v);
        } else {
            unknown.push(Violation::new(&k, format!("unknown key in {source}")));
        }
    }
    unknown
}

/// Defaults, then the JSON file at `path` (an empty file means no
/// changes), then `key=value` overrides. The result is fully validated.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let Value::Object(mut merged) = serde_json::to_value(RunConfig::default()).expect("defaults serialise") else {
        unreachable!("config serialises to an object")
    };
    let mut violations = Vec::new();
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        if !text.trim().is_empty() {
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(file)) => violations.extend(merge(&mut merged, file, "config file")),
                Ok(_) => return Err(ConfigError::Parse(format!("{} must hold a JSON object", path.display()))),
                Err(e) => return Err(ConfigError::Parse(format!("{}: {e}", path.display()))),
            }
        }
    }
    let mut flags = Map::new();
    for item in overrides {
        let (k, v) = parse_override(item)?;
        flags.insert(k, v);
    }
    violations.extend(merge(&mut merged, flags, "overrides"));
    if !violations.is_empty() {
        return Err(ConfigError::Invalid(violations));
    }
    let cfg: RunConfig = match serde_json::from_value(Value::Object(merged.clone())) {
        Ok(cfg) => cfg,
        Err(_) => return Err(ConfigError::Invalid(type_violations(&merged))),
    };
    cfg.check()?;
    Ok(cfg)
}

/// Field-by-field type errors, so every bad value is named.
fn type_violations(merged: &Map<String, Value>) -> Vec<Violation> {
    let defaults = serde_json::to_value(RunConfig::default()).unwrap();
    let mut out = Vec::new();
    for (k, v) in merged {
        let mut probe = defaults.clone();
        probe[k] = v.clone();
        if let Err(e) = serde_json::from_value::<RunConfig>(probe) {
            out.push(Violation::new(k, e.to_string()));
        }
    }
    if out.is_empty() {
        out.push(Violation::new("*", "config does not deserialise"));
    }
    out
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            height: self.height,
            width: self.width,
            tau: self.tau,
            patch: self.patch,
            enc_dim: self.enc_dim,
            enc_depth: self.enc_depth,
            enc_heads: self.enc_heads,
            dec_dim: self.dec_dim,
            dec_depth: self.dec_depth,
            dec_heads: self.dec_heads,
            mlp_ratio: self.mlp_ratio,
            num_classes: self.num_classes,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            beta1: self.beta1,
            beta2: self.beta2.unwrap_or(self.default_beta2()),
            eps: 1e-8,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            seed: self.seed,
            phase: self.phase,
            loss_norm: self.loss_norm,
        }
    }

    fn default_beta2(&self) -> f64 {
        match self.phase {
            Phase::Pretrain => TrainConfig::pretrain().beta2,
            Phase::Finetune => TrainConfig::finetune().beta2,
        }
    }

    /// Fills phase-dependent defaults and replaces epoch counts by step
    /// counts for a dataset of `clips`.
    pub fn resolve(&mut self, clips: usize) {
        self.beta2 = Some(self.beta2.unwrap_or(self.default_beta2()));
        let steps = |epochs: f64| (epochs * clips as f64 / self.batch_size.max(1) as f64).ceil() as usize;
        if let Some(e) = self.epochs {
            self.total_steps = steps(e);
        }
        if let Some(e) = self.warmup_epochs {
            self.warmup_steps = steps(e).min(self.total_steps);
        }
    }

    pub fn norm(&self) -> ChannelNorm {
        default_norm(self.channels)
    }

    pub fn pretrain_options(&self) -> PretrainOptions {
        PretrainOptions {
            model: self.model(),
            train: self.train(),
            mask: MaskSettings {
                rho_pre: self.rho_pre,
                rho_post: self.rho_post,
                metric: self.metric,
                order: self.order,
                allow_ratio_override: self.allow_ratio_override,
                scope: self.loss_scope,
                normalize_target: self.normalize_target,
            },
            alpha: self.alpha,
            stride: self.stride,
            smoothing: self.smoothing,
            norm: self.norm(),
        }
    }

    pub fn finetune_options(&self) -> FinetuneOptions {
        FinetuneOptions {
            model: self.model(),
            train: self.train(),
            rho_pre: self.rho_pre_ft,
            metric: self.metric,
            order: self.order,
            stride: self.stride,
            norm: self.norm(),
        }
    }

    /// Every violated constraint.
    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        for msg in self.model().violations() {
            let field = msg.split_whitespace().next().unwrap_or("model").to_string();
            v.push(Violation::new(&field, msg));
        }
        for msg in self.train().violations() {
            let field = msg.split_whitespace().next().unwrap_or("train").to_string();
            v.push(Violation::new(&field, msg));
        }
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        for (name, value) in [("rho_pre", self.rho_pre), ("rho_post", self.rho_post), ("rho_pre_ft", self.rho_pre_ft)] {
            if !unit(value) {
                v.push(Violation::new(name, format!("{value} must lie in (0, 1]")));
            }
        }
        if self.phase == Phase::Pretrain && !self.allow_ratio_override {
            let product = self.rho_pre * self.rho_post;
            if (product - PAIR_PRODUCT).abs() > RATIO_TOL {
                v.push(Violation::new(
                    "rho_pre*rho_post",
                    format!("product {product} must equal {PAIR_PRODUCT} (set allow_ratio_override to relax)"),
                ));
            }
        }
        if !(self.alpha >= 1.0) {
            v.push(Violation::new("alpha", format!("{} must be >= 1", self.alpha)));
        }
        if self.stride == 0 {
            v.push(Violation::new("stride", "must be positive"));
        }
        for (name, e) in [("epochs", self.epochs), ("warmup_epochs", self.warmup_epochs)] {
            if let Some(e) = e {
                if !(e >= 0.0 && e.is_finite()) {
                    v.push(Violation::new(name, format!("{e} must be finite and >= 0")));
                }
            }
        }
        v
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(v))
        }
    }

    /// Pretty JSON, with the epoch-to-step rule spelled out.
    pub fn resolved_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        v["step_rule"] = Value::String("steps = ceil(epochs * clips / batch_size)".into());
        serde_json::to_string_pretty(&v).expect("json") + "\n"
    }
}

/// ImageNet statistics for RGB, identity otherwise.
pub fn default_norm(channels: usize) -> ChannelNorm {
    if channels == 3 {
        ChannelNorm::imagenet()
    } else {
        ChannelNorm::identity(channels)
    }
}
