use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    clip_global_norm, loss_and_grads, total_loss, AdamW, Checkpoint, LossBreakdown, OptimizerState, StepOutcome,
    TrainConfig,
};
use crate::data::{Batch, EncodedDialogue, Vocab, PAD_ID};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Real;

/// One line of the JSONL metric log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub l_cfm: f64,
    pub l_sim: f64,
    pub l_rgm: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub first_step: u64,
    pub last_step: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_validation: Option<f64>,
    pub skipped_steps: u64,
}

fn seed_mix(seed: u64, salt: u64, value: u64) -> u64 {
    seed ^ salt.wrapping_mul(0xA24B_AED4_963E_E407) ^ value.wrapping_mul(0x9FB2_1C65_1E98_DF25)
}

pub struct Trainer<F: Real> {
    params: ModelParams<F>,
    optimizer: AdamW<F>,
    config: TrainConfig,
    vocab: Vocab,
    train: Vec<EncodedDialogue>,
    step: u64,
    best_validation: Option<f64>,
}

impl<F: Real> Trainer<F> {
    pub fn new(params: ModelParams<F>, vocab: Vocab, train: Vec<EncodedDialogue>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Corpus("training set is empty".into()));
        }
        if vocab.len() != params.config().vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                params.config().vocab_size
            )));
        }
        let optimizer = AdamW::new(config.optimizer, params.tensors());
        Ok(Trainer {
            params,
            optimizer,
            config,
            vocab,
            train,
            step: 0,
            best_validation: None,
        })
    }

    /// Restores parameters, optimizer moments and the step counter. With the
    /// same training set the continuation is identical to an uninterrupted run.
    pub fn resume(checkpoint: &Checkpoint, train: Vec<EncodedDialogue>, config: Option<TrainConfig>) -> Result<Self> {
        let config = config
            .or_else(|| checkpoint.train_config.clone())
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training configuration".into()))?;
        let mut t = Trainer::new(checkpoint.params.cast(), checkpoint.vocab.clone(), train, config)?;
        if let Some(o) = &checkpoint.optimizer {
            t.optimizer = o.restore();
        }
        t.step = checkpoint.step;
        t.best_validation = checkpoint.best_validation;
        Ok(t)
    }

    pub fn params(&self) -> &ModelParams<F> {
        &self.params
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn optimizer(&self) -> &AdamW<F> {
        &self.optimizer
    }

    pub fn best_validation(&self) -> Option<f64> {
        self.best_validation
    }

    /// Training-set indices used at `step` (1-based). Each epoch is a fresh
    /// permutation seeded by the run seed and the epoch number.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.train.len();
        let bs = self.config.batch_size.min(n);
        let per_epoch = n.div_ceil(bs) as u64;
        let b = step.saturating_sub(1);
        let (epoch, within) = (b / per_epoch, (b % per_epoch) as usize);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed_mix(self.config.seed, 1, epoch)));
        perm[within * bs..((within + 1) * bs).min(n)].to_vec()
    }

    fn batch_for(&self, indices: &[usize]) -> Batch {
        let rows: Vec<EncodedDialogue> = indices.iter().map(|&i| self.train[i].clone()).collect();
        let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        Batch::pad(&rows, width, PAD_ID)
    }

    /// Runs one optimization step. A non-finite loss aborts with the offending
    /// sample indices; a non-finite gradient skips the update.
    pub fn step(&mut self) -> Result<StepLog> {
        let step = self.step + 1;
        let indices = self.batch_indices(step);
        let batch = self.batch_for(&indices);
        let dropout_seed = (self.params.config().dropout > 0.0).then(|| seed_mix(self.config.seed, 2, step));
        let (loss, mut grads) = loss_and_grads(
            &self.params,
            &batch,
            &self.config.objectives,
            self.config.normalization,
            dropout_seed,
        )?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step} (cfm {}, sim {}, rgm {}); training samples {indices:?}",
                loss.l_cfm, loss.l_sim, loss.l_rgm
            )));
        }
        clip_global_norm(&mut grads, self.config.grad_clip);
        let lr = self.config.lr_at(step);
        if self.optimizer.update(self.params.tensors_mut(), &grads, lr)? == StepOutcome::SkippedNonFinite {
            log::warn!("step {step}: non-finite gradient on samples {indices:?}");
        }
        self.step = step;
        Ok(StepLog {
            step,
            lr,
            l_cfm: loss.l_cfm,
            l_sim: loss.l_sim,
            l_rgm: loss.l_rgm,
            total: loss.total,
        })
    }

    /// Loss over a whole evaluation set, normalized over all of it.
    pub fn evaluate(&self, rows: &[EncodedDialogue]) -> Result<LossBreakdown> {
        evaluate(&self.params, rows, &self.config)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.cast(),
            vocab: self.vocab.clone(),
            step: self.step,
            train_config: Some(self.config.clone()),
            optimizer: Some(OptimizerState::capture(&self.optimizer)),
            best_validation: self.best_validation,
        }
    }

    /// Trains until `total_steps`, appending a metric line per step to
    /// `metrics`. With `out_dir`, writes `step-<n>.dflw` every
    /// `checkpoint_every` steps, `best.dflw` on validation improvement and
    /// `last.dflw` at the end.
    pub fn run(
        &mut self,
        validation: &[EncodedDialogue],
        out_dir: Option<&Path>,
        mut metrics: Option<&mut dyn Write>,
    ) -> Result<RunSummary> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let first_step = self.step + 1;
        let mut initial_loss = f64::NAN;
        let mut final_loss = f64::NAN;
        while self.step < self.config.total_steps {
            let log = self.step()?;
            if log.step == first_step {
                initial_loss = log.total;
            }
            final_loss = log.total;
            if let Some(w) = metrics.as_deref_mut() {
                let line = serde_json::to_string(&log)?;
                writeln!(w, "{line}").map_err(|e| Error::io(Path::new("<metrics>"), e))?;
            }
            let last = self.step == self.config.total_steps;
            let every = |n: u64| n > 0 && self.step.is_multiple_of(n);
            if !validation.is_empty() && (last || every(self.config.validate_every)) {
                let v = self.evaluate(validation)?.total;
                log::info!("step {}: validation loss {v:.4}", self.step);
                if self.best_validation.is_none_or(|b| v < b) {
                    self.best_validation = Some(v);
                    if let Some(dir) = out_dir {
                        self.checkpoint().save(&dir.join("best.dflw"))?;
                    }
                }
            }
            if let Some(dir) = out_dir {
                if every(self.config.checkpoint_every) {
                    self.checkpoint().save(&dir.join(format!("step-{}.dflw", self.step)))?;
                }
                if last {
                    self.checkpoint().save(&dir.join("last.dflw"))?;
                }
            }
        }
        Ok(RunSummary {
            first_step,
            last_step: self.step,
            initial_loss,
            final_loss,
            best_validation: self.best_validation,
            skipped_steps: self.optimizer.skipped,
        })
    }
}

/// Eval-mode loss of `params` over `rows`, normalized over the whole set.
pub fn evaluate<F: Real>(
    params: &ModelParams<F>,
    rows: &[EncodedDialogue],
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let batch = Batch::pad(rows, width, PAD_ID);
    total_loss(params, &batch, &config.objectives, config.normalization)
}
