use std::cmp::Ordering;

use super::Hypothesis;
use crate::data::CTX_ID;
use crate::error::{Error, Result};

/// Source of next-token log-probabilities for a decoding state.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    /// Log-probabilities over the vocabulary; disallowed tokens are −∞.
    fn log_probs(&self, state: &Self::State) -> Result<Vec<f64>>;
    /// State after appending `token`.
    fn advance(&self, state: &Self::State, token: u32) -> Result<Self::State>;
}

/// Length-normalized ranking score `log p / len^alpha`.
pub fn rank_score(h: &Hypothesis, alpha: f64) -> f64 {
    if alpha == 0.0 {
        h.log_prob
    } else {
        h.log_prob / (h.tokens.len().max(1) as f64).powf(alpha)
    }
}

fn argmax(lp: &[f64]) -> Result<(u32, f64)> {
    let mut best: Option<(u32, f64)> = None;
    for (i, &v) in lp.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::Numeric(format!("NaN log-probability for token {i}")));
        }
        if v > f64::NEG_INFINITY && best.is_none_or(|(_, b)| v > b) {
            best = Some((i as u32, v));
        }
    }
    best.ok_or_else(|| Error::Numeric("no token has finite probability".into()))
}

/// Repeatedly appends the most probable token (lowest id on ties) until
/// `[C]` or `cap` tokens.
pub fn greedy_search<S: StepScorer>(scorer: &S, mut state: S::State, cap: usize) -> Result<Hypothesis> {
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    while tokens.len() < cap {
        let (tok, lp) = argmax(&scorer.log_probs(&state)?)?;
        tokens.push(tok);
        log_prob += lp;
        if tok == CTX_ID {
            break;
        }
        if tokens.len() < cap {
            state = scorer.advance(&state, tok)?;
        }
    }
    Ok(Hypothesis {
        tokens,
        log_prob,
        finished: true,
    })
}

fn by_score_then_tokens(a: &(f64, Vec<u32>, usize), b: &(f64, Vec<u32>, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

/// Beam search. Each step ranks all one-token extensions of the live beam by
/// cumulative log-probability (ties by token sequence) and keeps the best
/// `2·width`; `[C]`-ending candidates among the top `width` join the finished
/// pool, and the first `width` other candidates form the next beam. Search
/// stops once `width` hypotheses are finished, the beam is empty, or `cap`
/// tokens are reached (capped hypotheses are finished as they stand).
/// Returns at most `width` hypotheses ranked by [`rank_score`].
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    state: S::State,
    width: usize,
    cap: usize,
    alpha: f64,
) -> Result<Vec<Hypothesis>> {
    if width == 0 || cap == 0 {
        return Err(Error::Config("beam width and length cap must be positive".into()));
    }
    let mut live: Vec<(Vec<u32>, f64, S::State)> = vec![(Vec::new(), 0.0, state)];
    let mut pool: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() && pool.len() < width {
        let mut cands: Vec<(f64, Vec<u32>, usize)> = Vec::new();
        for (i, (toks, lp, st)) in live.iter().enumerate() {
            let step = scorer.log_probs(st)?;
            for (v, &l) in step.iter().enumerate() {
                if l.is_nan() {
                    return Err(Error::Numeric(format!("NaN log-probability for token {v}")));
                }
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut t = toks.clone();
                t.push(v as u32);
                cands.push((lp + l, t, i));
            }
        }
        cands.sort_by(by_score_then_tokens);
        cands.truncate(2 * width);

        let mut next = Vec::new();
        for (rank, (lp, toks, parent)) in cands.into_iter().enumerate() {
            if toks.last() == Some(&CTX_ID) {
                if rank < width {
                    pool.push(Hypothesis {
                        tokens: toks,
                        log_prob: lp,
                        finished: true,
                    });
                }
            } else if next.len() < width {
                if toks.len() >= cap {
                    pool.push(Hypothesis {
                        tokens: toks,
                        log_prob: lp,
                        finished: true,
                    });
                } else {
                    let st = scorer.advance(&live[parent].2, *toks.last().expect("nonempty"))?;
                    next.push((toks, lp, st));
                }
            }
        }
        live = next;
    }
    pool.sort_by(|a, b| {
        rank_score(b, alpha)
            .total_cmp(&rank_score(a, alpha))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    pool.truncate(width);
    Ok(pool)
}
