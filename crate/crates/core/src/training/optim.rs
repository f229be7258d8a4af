use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN or ±∞; parameters and moments are unchanged.
    SkippedNonFinite,
}

/// AdamW with decoupled weight decay:
/// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub first_moment: Vec<Tensor<F>>,
    pub second_moment: Vec<Tensor<F>>,
    /// Number of applied updates.
    pub step: u64,
    pub skipped: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig, params: &[Tensor<F>]) -> Self {
        AdamW {
            config,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            skipped: 0,
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>], lr: f64) -> Result<StepOutcome> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} tensors, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.all_finite()) {
            self.skipped += 1;
            log::warn!("non-finite gradient: optimizer step skipped ({} so far)", self.skipped);
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let one = F::one();
        let bc1 = one - F::lit(c.beta1.powi(t));
        let bc2 = one - F::lit(c.beta2.powi(t));
        let (lr, wd, eps) = (F::lit(lr), F::lit(c.weight_decay), F::lit(c.eps));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (j, (pj, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let old = *pj;
                *pj = old - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * old;
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm<F: Real>(grads: &[Tensor<F>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm.is_finite() && norm > max_norm {
        let s = F::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}
