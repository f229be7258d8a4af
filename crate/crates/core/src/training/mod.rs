mod checkpoint;
mod losses;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::data::{tokenize_dialogue, DialogueSample, EncodedDialogue, Vocab};
use crate::error::{Error, Result};
use crate::model::{encode_for_model, ModelConfig};

pub use checkpoint::{checkpoint_hash, Checkpoint, OptimizerState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use losses::{
    is_stop, loss_and_grads, loss_cfm, loss_rgm, loss_sim, sample_loss, sim_targets, total_loss, LossBreakdown,
    SampleLoss, TermCounts,
};
pub use optim::{clip_global_norm, global_norm, AdamW, AdamWConfig, StepOutcome};
pub use trainer::{evaluate, RunSummary, StepLog, Trainer};

/// How each loss term is scaled before summing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// Context loss per predicted context, token losses per target token.
    #[default]
    PerUnit,
    RawSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub cfm: bool,
    pub sim: bool,
    pub rgm: bool,
    /// Stop gradients through the regression target of the context loss.
    pub detach_cfm_target: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            cfm: true,
            sim: true,
            rgm: true,
            detach_cfm_target: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub objectives: ObjectiveConfig,
    pub normalization: LossNormalization,
    /// Write a numbered checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Evaluate on the validation set every this many steps (0: only at the end).
    pub validate_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 2e-4,
            warmup_steps: 100,
            total_steps: 1000,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            seed: 0,
            objectives: ObjectiveConfig::default(),
            normalization: LossNormalization::PerUnit,
            checkpoint_every: 0,
            validate_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(Error::Config(format!("invalid peak_lr {}", self.peak_lr)));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return Err(Error::Config(
                "optimizer betas must lie in [0,1) and eps must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_at(step, self.peak_lr, self.warmup_steps, self.total_steps)
    }
}

/// Encodes whole dialogues for training within the model's limits.
pub fn encode_corpus(samples: &[DialogueSample], vocab: &Vocab, config: &ModelConfig) -> Result<Vec<EncodedDialogue>> {
    samples
        .iter()
        .map(|s| encode_for_model(config, &tokenize_dialogue(s, vocab), 0, 0))
        .collect()
}

/// Linear warmup to `peak` over `warmup` steps, then linear decay reaching 0
/// at `total`.
pub fn lr_at(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    peak * (total - step) as f64 / (total - warmup) as f64
}
