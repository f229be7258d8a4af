use serde::{Deserialize, Serialize};

use super::{respond, DecodeConfig};
use crate::data::{decode_tokens, Speaker, TokenizedDialogue, Vocab};
use crate::error::{Error, Result};
use crate::flow_score::{flow_score, measure_last_turn, turn_similarity, ConversationLog, LogTurn, Role};
use crate::model::{encode_for_model, predict_next, ModelParams};
use crate::projection::{trajectory, TrajectoryPoint};
use crate::tensor::Real;

/// One utterance of a chat session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTurn {
    pub role: Role,
    pub text: String,
}

/// Outcome of one user message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub reply: String,
    /// Index of the bot utterance within the session.
    pub turn_index: usize,
    pub s_k: f64,
    pub flow_running: f64,
    pub predicted_norm: f64,
    pub realized_norm: f64,
    /// True when old utterances had to be evicted to fit the model limits.
    pub truncated: bool,
}

/// Human (speaker `A`) talking to the model (speaker `B`).
#[derive(Debug, Clone, PartialEq)]
pub struct ChatSession {
    decode: DecodeConfig,
    history: TokenizedDialogue,
    turns: Vec<SessionTurn>,
    similarities: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl ChatSession {
    pub fn new(decode: DecodeConfig) -> Result<Self> {
        decode.validate()?;
        Ok(ChatSession {
            decode,
            history: TokenizedDialogue::empty(Speaker::A),
            turns: Vec::new(),
            similarities: Vec::new(),
        })
    }

    pub fn decode_config(&self) -> &DecodeConfig {
        &self.decode
    }

    pub fn turns(&self) -> &[SessionTurn] {
        &self.turns
    }

    pub fn similarities(&self) -> &[f64] {
        &self.similarities
    }

    pub fn history(&self) -> &TokenizedDialogue {
        &self.history
    }

    /// Appends the user's message, decodes and appends a reply, and measures
    /// how well the reply's realized influence matched the prediction.
    pub fn step<F: Real>(&mut self, params: &ModelParams<F>, vocab: &Vocab, user_text: &str) -> Result<ChatTurn> {
        let user_tokens = vocab.encode_text(user_text);
        if user_tokens.is_empty() {
            return Err(Error::Encoding("message contains no tokens".into()));
        }
        let mut history = self.history.clone();
        history.push(Speaker::A, user_tokens);
        let response = respond(params, &history, &self.decode)?;
        let reply_tokens = response.best().content().to_vec();
        history.push(Speaker::B, reply_tokens.clone());
        let measured = measure_last_turn(params, &history)?;
        let s_k = turn_similarity(&measured.predicted, &measured.realized);

        let reply = decode_tokens(&reply_tokens, vocab);
        self.history = history;
        self.turns.push(SessionTurn {
            role: Role::Human,
            text: user_text.to_string(),
        });
        self.turns.push(SessionTurn {
            role: Role::Bot,
            text: reply.clone(),
        });
        self.similarities.push(s_k);
        Ok(ChatTurn {
            reply,
            turn_index: self.turns.len() - 1,
            s_k,
            flow_running: flow_score(&self.similarities)?.flow,
            predicted_norm: norm(&measured.predicted),
            realized_norm: norm(&measured.realized),
            truncated: response.dropped_utterances > 0 || measured.dropped_utterances > 0,
        })
    }

    /// Rebuilds a session by sending `messages` in order.
    pub fn replay<F: Real>(
        params: &ModelParams<F>,
        vocab: &Vocab,
        decode: DecodeConfig,
        messages: &[&str],
    ) -> Result<(ChatSession, Vec<ChatTurn>)> {
        let mut s = ChatSession::new(decode)?;
        let turns = messages
            .iter()
            .map(|m| s.step(params, vocab, m))
            .collect::<Result<Vec<_>>>()?;
        Ok((s, turns))
    }

    /// Contexts C₁..C_{N+1} of the (possibly truncated) session, with the
    /// number of evicted utterances.
    pub fn contexts<F: Real>(&self, params: &ModelParams<F>) -> Result<(Vec<Vec<f64>>, usize)> {
        let e = encode_for_model(params.config(), &self.history, 0, 1)?;
        let next = predict_next(params, &e)?;
        let rows = next
            .contexts
            .to_rows()
            .iter()
            .map(|r| r.iter().map(|x| x.as_f64()).collect())
            .collect();
        Ok((rows, e.dropped_utterances))
    }

    /// Contexts of the session projected to 2-D.
    pub fn trajectory<F: Real>(&self, params: &ModelParams<F>) -> Result<Vec<TrajectoryPoint>> {
        let (rows, dropped) = self.contexts(params)?;
        let roles: Vec<String> = self.turns[dropped..]
            .iter()
            .map(|t| t.role.label().to_string())
            .collect();
        trajectory(&rows, &roles)
    }

    pub fn to_log(&self) -> ConversationLog {
        ConversationLog {
            bot_id: None,
            rating: None,
            turns: self
                .turns
                .iter()
                .map(|t| LogTurn {
                    speaker: t.role,
                    text: t.text.clone(),
                })
                .collect(),
        }
    }
}
