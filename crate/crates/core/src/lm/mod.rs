//! Decoder-only transformer language model trained from scratch on the
//! synthetic corpora.

mod checkpoint;
mod gradcheck;
mod infer;
mod layout;
mod model;
mod optim;
mod scalar;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use gradcheck::{gradient_check, miniature_config, GradCheckReport, GRADCHECK_TOLERANCE};
pub use infer::{
    argmax_lowest, greedy_next, score_completion, swap_embeddings, Forward, HiddenStates,
};
pub use layout::{Layout, TensorSpec};
pub use model::{Batch, Cache, Model};
pub use optim::{lr_at, AdamW};
pub use scalar::Scalar;
pub use train::{continue_training, train, TrainOutcome, TrainingLog};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeTag {
    Tiny,
    Small,
    Medium,
}

impl SizeTag {
    pub const ALL: [SizeTag; 3] = [SizeTag::Tiny, SizeTag::Small, SizeTag::Medium];

    pub fn as_str(self) -> &'static str {
        match self {
            SizeTag::Tiny => "tiny",
            SizeTag::Small => "small",
            SizeTag::Medium => "medium",
        }
    }

    /// (n_layers, n_heads, d_model)
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            SizeTag::Tiny => (4, 4, 256),
            SizeTag::Small => (6, 8, 512),
            SizeTag::Medium => (8, 8, 768),
        }
    }

    pub fn train_steps(self) -> usize {
        match self {
            SizeTag::Tiny => 5000,
            SizeTag::Small => 8000,
            SizeTag::Medium => 10000,
        }
    }

    /// Nominal parameter count the size is meant to approximate.
    pub fn nominal_params(self) -> usize {
        match self {
            SizeTag::Tiny => 3_400_000,
            SizeTag::Small => 10_000_000,
            SizeTag::Medium => 25_600_000,
        }
    }
}

impl fmt::Display for SizeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SizeTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(SizeTag::Tiny),
            "small" => Ok(SizeTag::Small),
            "medium" => Ok(SizeTag::Medium),
            _ => Err(Error::InvalidSpec(format!("unknown model size '{s}'"))),
        }
    }
}

pub const MAX_SEQ_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub size_tag: SizeTag,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub weight_tying: bool,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn for_size(size_tag: SizeTag, vocab_size: usize) -> Self {
        let (n_layers, n_heads, d_model) = size_tag.dims();
        ModelConfig {
            size_tag,
            n_layers,
            n_heads,
            d_model,
            vocab_size,
            max_seq_len: MAX_SEQ_LEN,
            weight_tying: true,
            dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_params(&self) -> usize {
        Layout::new(self).total
    }

    pub fn validate(&self) -> Result<()> {
        if !self.weight_tying {
            return Err(Error::InvalidSpec(
                "only tied input/output embeddings are supported".into(),
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidSpec(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.n_layers == 0 {
            return Err(Error::InvalidSpec("empty model dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidSpec(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Learning rate at the last step as a fraction of `base_lr`.
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_size(size_tag: SizeTag, seed: u64) -> Self {
        TrainConfig {
            steps: size_tag.train_steps(),
            batch_size: 64,
            base_lr: 3e-4,
            min_lr_ratio: 0.0,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidSpec(
                "steps and batch_size must be positive".into(),
            ));
        }
        if !(self.base_lr > 0.0) || !(0.0..=0.01).contains(&self.min_lr_ratio) {
            return Err(Error::InvalidSpec(
                "learning-rate schedule out of range".into(),
            ));
        }
        Ok(())
    }
}
