//! Influence-conditioned response decoding.

mod chat;
mod search;

use serde::{Deserialize, Serialize};

pub use chat::{ChatSession, ChatTurn, SessionTurn};
pub use search::{beam_search, greedy_search, rank_score, StepScorer};

use crate::data::{EncodedDialogue, TokenizedDialogue, CTX_ID, PAD_ID, SPEAKER1_ID, SPEAKER2_ID};
use crate::error::{Error, Result};
use crate::model::{encode_for_model, predict_next, DecoderState, ModelParams};
use crate::tensor::{kernels, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_width: usize,
    /// Upper bound on generated tokens, counting the closing `[C]`.
    pub max_new_tokens: usize,
    /// Hypotheses are ranked by `log p / length^alpha`.
    pub length_alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            beam_width: 5,
            max_new_tokens: 32,
            length_alpha: 0.7,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig::default()
    }

    pub fn beam(width: usize) -> Self {
        DecodeConfig {
            strategy: Strategy::Beam,
            beam_width: width,
            ..DecodeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if !self.length_alpha.is_finite() || self.length_alpha < 0.0 {
            return Err(Error::Config(format!("invalid length_alpha {}", self.length_alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated ids, ending with `[C]` unless the length cap was hit.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the closing `[C]`.
    pub fn content(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&CTX_ID) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn terminated(&self) -> bool {
        self.tokens.last() == Some(&CTX_ID)
    }
}

/// I′ for the next utterance of a `[C]`-terminated prefix.
pub fn predict_next_influence<F: Real>(params: &ModelParams<F>, prefix: &EncodedDialogue) -> Result<Vec<F>> {
    Ok(predict_next(params, prefix)?.influence_pred)
}

/// Next-token scorer backed by the model: I′ is fixed for the utterance and
/// hidden states are extended through a key/value cache.
pub struct ModelScorer<'p, F: Real> {
    params: &'p ModelParams<F>,
    influence: Vec<F>,
    segment: usize,
    start_position: usize,
}

#[derive(Clone)]
pub struct ModelState<F> {
    decoder: DecoderState<F>,
    generated: usize,
}

impl<'p, F: Real> ModelScorer<'p, F> {
    /// Prepares decoding of the utterance that follows `prefix`, spoken by
    /// the speaker with segment id `segment`.
    pub fn new(params: &'p ModelParams<F>, prefix: &EncodedDialogue, segment: usize) -> Result<(Self, ModelState<F>)> {
        let influence = predict_next_influence(params, prefix)?;
        let decoder = DecoderState::from_prefix(params, prefix)?;
        let scorer = ModelScorer {
            params,
            influence: if params.config().condition_on_influence {
                influence
            } else {
                vec![F::zero(); params.config().d_model]
            },
            segment,
            start_position: prefix.valid_len,
        };
        Ok((scorer, ModelState { decoder, generated: 0 }))
    }

    /// Generated-token budget left by the position limit (closing `[C]`
    /// included).
    pub fn position_budget(&self) -> usize {
        self.params.config().max_positions.saturating_sub(self.start_position)
    }

    pub fn influence(&self) -> &[F] {
        &self.influence
    }
}

impl<F: Real> StepScorer for ModelScorer<'_, F> {
    type State = ModelState<F>;

    fn vocab_size(&self) -> usize {
        self.params.config().vocab_size
    }

    fn log_probs(&self, state: &ModelState<F>) -> Result<Vec<f64>> {
        let p = self.params;
        let lay = p.layout();
        let w = &p.tensors()[lay.generator_weight];
        let b = &p.tensors()[lay.generator_bias];
        let v = p.config().vocab_size;
        let input: Vec<F> = self
            .influence
            .iter()
            .chain(state.decoder.last_hidden())
            .copied()
            .collect();
        let mut logits = vec![F::zero(); v];
        kernels::matmul(&input, w.data(), 1, input.len(), v, &mut logits);
        for (l, &bi) in logits.iter_mut().zip(b.data()) {
            *l = *l + bi;
        }
        let mut lsm = vec![F::zero(); v];
        kernels::log_softmax_row(&logits, &mut lsm);
        let mut out: Vec<f64> = lsm.iter().map(|x| x.as_f64()).collect();
        for id in [PAD_ID, SPEAKER1_ID, SPEAKER2_ID] {
            if (id as usize) < v {
                out[id as usize] = f64::NEG_INFINITY;
            }
        }
        Ok(out)
    }

    fn advance(&self, state: &ModelState<F>, token: u32) -> Result<ModelState<F>> {
        let mut next = state.clone();
        next.decoder
            .push(self.params, token, self.segment, self.start_position + state.generated)?;
        next.generated += 1;
        Ok(next)
    }
}

/// Result of decoding one response.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    /// Ranked hypotheses (one for greedy decoding).
    pub hypotheses: Vec<Hypothesis>,
    pub influence_pred: Vec<f64>,
    /// Oldest history utterances dropped to make room.
    pub dropped_utterances: usize,
}

impl Response {
    pub fn best(&self) -> &Hypothesis {
        &self.hypotheses[0]
    }
}

/// Decodes the next utterance after `history`, spoken by
/// `history.next_speaker()`. Old utterances are dropped if the history plus
/// the reply would exceed the model's limits.
pub fn respond<F: Real>(
    params: &ModelParams<F>,
    history: &TokenizedDialogue,
    config: &DecodeConfig,
) -> Result<Response> {
    config.validate()?;
    let c = params.config();
    let utts = &history.utterances;
    let newest: usize = utts[utts.len().saturating_sub(2)..]
        .iter()
        .map(|u| u.tokens.len() + 1)
        .sum();
    let room = config
        .max_new_tokens
        .min(c.max_positions / 2)
        .min(c.max_positions.saturating_sub(1 + newest))
        .max(1);
    let prefix = encode_for_model(c, history, room, 1)?;
    let segment = history.next_speaker().segment();
    let (scorer, state) = ModelScorer::new(params, &prefix, segment)?;
    let cap = config.max_new_tokens.min(scorer.position_budget());
    if cap == 0 {
        return Err(Error::Encoding("no positions left for a reply".into()));
    }
    let hypotheses = match config.strategy {
        Strategy::Greedy => vec![greedy_search(&scorer, state, cap)?],
        Strategy::Beam => beam_search(&scorer, state, config.beam_width, cap, config.length_alpha)?,
    };
    Ok(Response {
        hypotheses,
        influence_pred: scorer.influence().iter().map(|x| x.as_f64()).collect(),
        dropped_utterances: prefix.dropped_utterances,
    })
}

/// Greedy decode of the next utterance; convenience wrapper over [`respond`].
pub fn greedy_decode<F: Real>(
    params: &ModelParams<F>,
    history: &TokenizedDialogue,
    max_new_tokens: usize,
) -> Result<Hypothesis> {
    let config = DecodeConfig {
        max_new_tokens,
        ..DecodeConfig::greedy()
    };
    Ok(respond(params, history, &config)?.hypotheses.remove(0))
}

pub fn beam_decode<F: Real>(
    params: &ModelParams<F>,
    history: &TokenizedDialogue,
    width: usize,
    max_new_tokens: usize,
    alpha: f64,
) -> Result<Vec<Hypothesis>> {
    let config = DecodeConfig {
        strategy: Strategy::Beam,
        beam_width: width,
        max_new_tokens,
        length_alpha: alpha,
    };
    Ok(respond(params, history, &config)?.hypotheses)
}
