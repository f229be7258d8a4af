use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LossNormalization, ObjectiveConfig};
use crate::data::{Batch, EncodedDialogue, CTX_ID};
use crate::error::Result;
use crate::model::{forward, Bound, ForwardOutput, Mode, ModelParams};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Per-step loss terms. `total` is always the plain sum of the three terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cfm: f64,
    pub l_sim: f64,
    pub l_rgm: f64,
    pub total: f64,
    pub n_contexts: usize,
    pub n_sim_tokens: usize,
    pub n_rgm_tokens: usize,
}

impl LossBreakdown {
    fn from_terms(l_cfm: f64, l_sim: f64, l_rgm: f64, counts: &TermCounts) -> Self {
        LossBreakdown {
            l_cfm,
            l_sim,
            l_rgm,
            total: l_cfm + l_sim + l_rgm,
            n_contexts: counts.contexts,
            n_sim_tokens: counts.sim_tokens,
            n_rgm_tokens: counts.rgm_tokens,
        }
    }
}

/// Σ_k ‖C_{k+1} − C′_{k+1}‖² (unnormalized). With `detach_target` the real
/// contexts are treated as constants.
pub fn loss_cfm<F: Real>(g: &mut Graph<F>, contexts: Var, contexts_pred: Var, detach_target: bool) -> Result<Var> {
    let n = g.shape(contexts_pred)[0];
    let tail: Vec<usize> = (1..=n).collect();
    let target = if detach_target {
        let rows = g.value(contexts).to_rows()[1..=n].to_vec();
        g.constant(Tensor::from_rows(&rows)?)
    } else {
        g.gather_rows(contexts, &tail)?
    };
    let diff = g.sub(target, contexts_pred)?;
    g.sum_squares(diff)
}

/// Bag-of-words targets: every content token of utterance k against row k.
pub fn sim_targets(encoded: &EncodedDialogue) -> Vec<(usize, usize)> {
    (0..encoded.num_utterances())
        .flat_map(|k| encoded.content_tokens(k).iter().map(move |&t| (k, t as usize)))
        .collect()
}

/// −Σ_k Σ_t log softmax(bow_k)[u_k^t] (unnormalized) and the token count.
pub fn loss_sim<F: Real>(g: &mut Graph<F>, bow_logits: Var, encoded: &EncodedDialogue) -> Result<(Var, usize)> {
    let targets = sim_targets(encoded);
    Ok((g.nll(bow_logits, &targets)?, targets.len()))
}

/// Autoregressive NLL over every generation target (utterance tokens and
/// their terminating `[C]`), unnormalized, and the token count.
pub fn loss_rgm<F: Real>(
    g: &mut Graph<F>,
    gen_logits: Var,
    gen_targets: &[(usize, usize)],
    encoded: &EncodedDialogue,
) -> Result<(Var, usize)> {
    let targets: Vec<(usize, usize)> = gen_targets
        .iter()
        .enumerate()
        .map(|(row, &(p, _))| (row, encoded.token_ids[p] as usize))
        .collect();
    debug_assert!(gen_targets.iter().all(|&(p, _)| p > 0 && encoded.loss_mask[p]));
    Ok((g.nll(gen_logits, &targets)?, targets.len()))
}

/// Denominators for per-unit normalization, counted over a whole batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TermCounts {
    pub contexts: usize,
    pub sim_tokens: usize,
    pub rgm_tokens: usize,
}

impl TermCounts {
    pub fn of(rows: &[EncodedDialogue]) -> Self {
        let mut c = TermCounts::default();
        for e in rows {
            c.contexts += e.num_utterances();
            c.sim_tokens += sim_targets(e).len();
            c.rgm_tokens += e.loss_mask.iter().filter(|&&m| m).count();
        }
        c
    }

    fn scales(&self, mode: LossNormalization) -> [f64; 3] {
        let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
        match mode {
            LossNormalization::PerUnit => [inv(self.contexts), inv(self.sim_tokens), inv(self.rgm_tokens)],
            LossNormalization::RawSum => [1.0, 1.0, 1.0],
        }
    }
}

/// Scaled loss terms of one dialogue on a graph.
#[derive(Debug, Clone, Copy)]
pub struct SampleLoss {
    pub cfm: Var,
    pub sim: Var,
    pub rgm: Var,
    pub total: Var,
}

/// Builds the scaled objective for one (possibly padded) dialogue. Disabled
/// objectives contribute a zero constant.
pub fn sample_loss<F: Real>(
    g: &mut Graph<F>,
    b: &Bound<'_>,
    encoded: &EncodedDialogue,
    objectives: &ObjectiveConfig,
    counts: &TermCounts,
    normalization: LossNormalization,
    mode: &mut Mode<'_>,
) -> Result<(SampleLoss, ForwardOutput)> {
    let out = forward(g, b, encoded, mode)?;
    let [s_cfm, s_sim, s_rgm] = counts.scales(normalization);
    let zero = g.constant(Tensor::scalar(F::zero()));

    let cfm = if objectives.cfm {
        let raw = loss_cfm(g, out.contexts, out.contexts_pred, objectives.detach_cfm_target)?;
        g.scale(raw, F::lit(s_cfm))?
    } else {
        zero
    };
    let sim = if objectives.sim {
        let (raw, _) = loss_sim(g, out.bow_logits, encoded)?;
        g.scale(raw, F::lit(s_sim))?
    } else {
        zero
    };
    let rgm = if objectives.rgm {
        let (raw, _) = loss_rgm(g, out.gen_logits, &out.gen_targets, encoded)?;
        g.scale(raw, F::lit(s_rgm))?
    } else {
        zero
    };
    let total = g.add(cfm, sim)?;
    let total = g.add(total, rgm)?;
    Ok((SampleLoss { cfm, sim, rgm, total }, out))
}

/// Per-sample dropout stream derived from a step seed.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

type SampleTerms<F> = ([f64; 3], Option<Vec<Tensor<F>>>);

#[allow(clippy::too_many_arguments)]
fn run_sample<F: Real>(
    params: &ModelParams<F>,
    row: &EncodedDialogue,
    index: usize,
    objectives: &ObjectiveConfig,
    counts: &TermCounts,
    normalization: LossNormalization,
    dropout_seed: Option<u64>,
    with_grads: bool,
) -> Result<SampleTerms<F>> {
    let mut g = Graph::new();
    let b = Bound::new(&mut g, params);
    let mut rng = dropout_seed.map(|s| sample_rng(s, index));
    let mut mode = match rng.as_mut() {
        Some(r) => Mode::Train(r),
        None => Mode::Eval,
    };
    let (loss, _) = sample_loss(&mut g, &b, row, objectives, counts, normalization, &mut mode)?;
    let terms = [loss.cfm, loss.sim, loss.rgm].map(|v| g.value(v).item().as_f64());
    let grads = if with_grads {
        let grads = g.backward(loss.total)?;
        Some(
            b.vars()
                .iter()
                .zip(params.tensors())
                .map(|(&v, p)| grads.wrt(v, p))
                .collect(),
        )
    } else {
        None
    };
    Ok((terms, grads))
}

fn batch_impl<F: Real>(
    params: &ModelParams<F>,
    batch: &Batch,
    objectives: &ObjectiveConfig,
    normalization: LossNormalization,
    dropout_seed: Option<u64>,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<Vec<Tensor<F>>>)> {
    let counts = TermCounts::of(&batch.rows);
    let results: Vec<_> = batch
        .rows
        .par_iter()
        .enumerate()
        .map(|(i, row)| {
            run_sample(
                params,
                row,
                i,
                objectives,
                &counts,
                normalization,
                dropout_seed,
                with_grads,
            )
        })
        .collect::<Result<_>>()?;

    let mut sums = [0.0f64; 3];
    let mut grads: Option<Vec<Tensor<F>>> = None;
    for (terms, g) in results {
        for (s, t) in sums.iter_mut().zip(terms) {
            *s += t;
        }
        if let Some(g) = g {
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, x) in acc.iter_mut().zip(g) {
                        for (ai, xi) in a.data_mut().iter_mut().zip(x.data()) {
                            *ai = *ai + *xi;
                        }
                    }
                }
            }
        }
    }
    Ok((LossBreakdown::from_terms(sums[0], sums[1], sums[2], &counts), grads))
}

/// Objective value on a batch (eval mode, no gradients).
pub fn total_loss<F: Real>(
    params: &ModelParams<F>,
    batch: &Batch,
    objectives: &ObjectiveConfig,
    normalization: LossNormalization,
) -> Result<LossBreakdown> {
    Ok(batch_impl(params, batch, objectives, normalization, None, false)?.0)
}

/// Objective and its gradient for every parameter tensor. Samples run in
/// parallel; their gradients are summed in batch order.
pub fn loss_and_grads<F: Real>(
    params: &ModelParams<F>,
    batch: &Batch,
    objectives: &ObjectiveConfig,
    normalization: LossNormalization,
    dropout_seed: Option<u64>,
) -> Result<(LossBreakdown, Vec<Tensor<F>>)> {
    let (b, g) = batch_impl(params, batch, objectives, normalization, dropout_seed, true)?;
    Ok((b, g.expect("gradients requested")))
}

/// `true` if `token` is a generation stop symbol.
pub fn is_stop(token: u32) -> bool {
    token == CTX_ID
}
