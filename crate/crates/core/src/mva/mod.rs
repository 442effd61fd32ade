//! Desk-scale masked video autoencoder trained on redundancy-robust tokens.
//!
//! The encoder sees only the visible subset; the decoder sees every selected
//! slot, with a learned mask token standing in for the hidden ones, and
//! predicts pixels for exactly those slots.

mod checkpoint;
mod model;
mod optim;
mod params;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbedError;
use crate::frameselect::FrameSelectError;
use crate::numerics::NumericsError;
use crate::rero::ReroError;
use crate::videodata::VideoError;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, config_digest, CKPT_MAGIC, CKPT_VERSION};
pub use model::{
    classify, decode, encode, finetune_loss, predict, prepare_finetune, prepare_pretrain, pretrain_loss, rero_loss,
    target_patches, DecoderLayout, FinetuneSample, MaskSettings, PositionTables, PretrainSample,
};
pub use optim::{lr_schedule, AdamW};
pub use params::{Bound, ParamStore};
pub use train::{
    evaluate, finetune, finetune_clips, load_labelled, load_manifest_clips, pipeline_grad_check, pretrain, pretrain_clips,
    FinetuneOptions, FinetuneReport, PretrainOptions, PretrainReport, TracePoint,
};

#[derive(Debug, Error)]
pub enum MvaError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty visible set")]
    EmptyVisible,
    #[error("loss scope {0:?} counts no tokens")]
    EmptyScope(LossScope),
    #[error("slot mismatch: {0}")]
    Slots(String),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("non-finite gradient in '{name}' at element {index}: {value}")]
    NonFiniteGrad { name: String, index: usize, value: f64 },
    #[error("non-finite parameter '{name}' after step {step}")]
    NonFiniteParam { name: String, step: usize },
    #[error("step {step} outside schedule of {total} steps")]
    Step { step: usize, total: usize },
    #[error("manifest has no labels")]
    Unlabelled,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Rero(#[from] ReroError),
    #[error(transparent)]
    FrameSelect(#[from] FrameSelectError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Which decoder outputs contribute to the reconstruction loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// Every selected token, visible ones included.
    #[default]
    AllRero,
    /// Selected tokens hidden from the encoder.
    MaskedOnly,
}

impl std::str::FromStr for LossScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all_rero" | "all-rero" => Ok(Self::AllRero),
            "masked_only" | "masked-only" => Ok(Self::MaskedOnly),
            _ => Err(format!("unknown loss scope '{s}' (expected all_rero or masked_only)")),
        }
    }
}

/// Architecture and input geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub tau: usize,
    pub patch: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
            tau: 8,
            patch: 4,
            enc_dim: 96,
            enc_depth: 4,
            enc_heads: 4,
            dec_dim: 48,
            dec_depth: 2,
            dec_heads: 4,
            mlp_ratio: 4,
            num_classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn frames(&self) -> usize {
        2 * self.tau
    }

    pub fn j(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        self.tau * self.j()
    }

    pub fn patch_dim(&self) -> usize {
        2 * self.patch * self.patch * self.channels
    }

    /// Every violated constraint, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let positive = [
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("tau", self.tau),
            ("patch", self.patch),
            ("enc_dim", self.enc_dim),
            ("enc_heads", self.enc_heads),
            ("dec_dim", self.dec_dim),
            ("dec_heads", self.dec_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        for (name, value) in positive {
            if value == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if self.patch > 0 && (self.height % self.patch != 0 || self.width % self.patch != 0) {
            v.push(format!("height {} and width {} must be divisible by patch {}", self.height, self.width, self.patch));
        }
        if self.enc_heads > 0 && self.enc_dim % self.enc_heads != 0 {
            v.push(format!("enc_dim {} not divisible by enc_heads {}", self.enc_dim, self.enc_heads));
        }
        if self.dec_heads > 0 && self.dec_dim % self.dec_heads != 0 {
            v.push(format!("dec_dim {} not divisible by dec_heads {}", self.dec_dim, self.dec_heads));
        }
        v
    }

    pub fn validate(&self) -> Result<(), MvaError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(MvaError::Config(v.join("; ")))
        }
    }
}

/// Optimiser and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub phase: Phase,
    pub loss_norm: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            base_lr: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_steps: 20,
            total_steps: 200,
            batch_size: 8,
            seed: 0,
            phase: Phase::Pretrain,
            loss_norm: 2,
        }
    }

    pub fn finetune() -> Self {
        Self { beta2: 0.999, phase: Phase::Finetune, ..Self::pretrain() }
    }

    /// `base_lr * batch_size / 256`.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            v.push(format!("base_lr {} must be finite and >= 0", self.base_lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            v.push("eps must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            v.push("weight_decay must be >= 0".into());
        }
        if self.warmup_steps > self.total_steps {
            v.push(format!("warmup_steps {} exceeds total_steps {}", self.warmup_steps, self.total_steps));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be positive".into());
        }
        if self.loss_norm != 2 {
            v.push(format!("loss_norm {} unsupported (only 2)", self.loss_norm));
        }
        v
    }
}
