//! Reference-free dialogue scoring from predicted versus realized semantic
//! influence, a perplexity baseline, and chatbot-level correlation analysis.

mod correlation;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use correlation::{fractional_ranks, pearson, spearman, Correlation};

use crate::data::{Speaker, TokenizedDialogue, Vocab};
use crate::error::{Error, Result};
use crate::model::{encode_for_model, forward, Bound, Mode, ModelParams};
use crate::projection::{trajectory, TrajectoryPoint};
use crate::tensor::{Graph, Real};

/// Similarities are clamped to this value before taking logarithms.
pub const SIMILARITY_FLOOR: f64 = -1.0 + 1e-6;

/// Values of `s` when one or both influence vectors are zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroConvention {
    pub both_zero: f64,
    pub one_zero: f64,
}

impl Default for ZeroConvention {
    fn default() -> Self {
        ZeroConvention {
            both_zero: 1.0,
            one_zero: 0.0,
        }
    }
}

/// `cos(a, b) · min(‖a‖, ‖b‖) / max(‖a‖, ‖b‖)`, which equals
/// `a·b / max(‖a‖², ‖b‖²)`.
pub fn turn_similarity_with(pred: &[f64], real: &[f64], zero: ZeroConvention) -> f64 {
    let aa: f64 = pred.iter().map(|x| x * x).sum();
    let bb: f64 = real.iter().map(|x| x * x).sum();
    match (aa == 0.0, bb == 0.0) {
        (true, true) => zero.both_zero,
        (true, false) | (false, true) => zero.one_zero,
        _ => {
            let ab: f64 = pred.iter().zip(real).map(|(x, y)| x * y).sum();
            (ab / aa.max(bb)).clamp(-1.0, 1.0)
        }
    }
}

pub fn turn_similarity(pred: &[f64], real: &[f64]) -> f64 {
    turn_similarity_with(pred, real, ZeroConvention::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowScore {
    pub flow: f64,
    /// Indices of similarities that were raised to [`SIMILARITY_FLOOR`].
    pub clamped: Vec<usize>,
}

/// `2^(−mean_k log₂((s_k + 1) / 2))`.
pub fn flow_score(similarities: &[f64]) -> Result<FlowScore> {
    if similarities.is_empty() {
        return Err(Error::Evaluation("flow score needs at least one similarity".into()));
    }
    let mut clamped = Vec::new();
    let mut sum = 0.0;
    for (i, &s) in similarities.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::Evaluation(format!("similarity {i} is not finite")));
        }
        let s = if s < SIMILARITY_FLOOR {
            clamped.push(i);
            SIMILARITY_FLOOR
        } else {
            s.min(1.0)
        };
        sum += ((s + 1.0) / 2.0).log2();
    }
    Ok(FlowScore {
        flow: (-sum / similarities.len() as f64).exp2(),
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Human,
    Bot,
}

impl Role {
    pub fn label(self) -> &'static str {
        match self {
            Role::Human => "human",
            Role::Bot => "bot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogTurn {
    pub speaker: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationLog {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bot_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
    pub turns: Vec<LogTurn>,
}

impl ConversationLog {
    pub fn bot_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.speaker == Role::Bot).count()
    }
}

/// Parses line-delimited conversation logs; blank lines are ignored.
pub fn parse_logs(text: &str) -> Result<Vec<ConversationLog>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let log: ConversationLog =
                serde_json::from_str(l).map_err(|e| Error::Evaluation(format!("log line {}: {e}", i + 1)))?;
            if log.rating.is_some_and(|r| !r.is_finite()) {
                return Err(Error::Evaluation(format!("log line {}: rating must be finite", i + 1)));
            }
            Ok(log)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnScore {
    /// Index of the turn in the log.
    pub turn: usize,
    pub similarity: f64,
    pub predicted_norm: f64,
    pub realized_norm: f64,
    /// Per-token NLL of the turn under the response generator.
    pub nll: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bot_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
    pub turns: Vec<TurnScore>,
    /// Number of scored bot turns.
    pub m: usize,
    pub flow: f64,
    pub baseline_perplexity: f64,
    /// Log turn indices whose similarity was clamped.
    pub clamped_turns: Vec<usize>,
    /// Log turn indices skipped because they contain no tokens.
    pub skipped_turns: Vec<usize>,
}

/// Influence-level measurements for the last utterance of a dialogue.
#[derive(Debug, Clone, PartialEq)]
pub struct LastTurn {
    pub predicted: Vec<f64>,
    pub realized: Vec<f64>,
    pub nll: f64,
    pub tokens: usize,
    /// Contexts C₁..C_{N+1} of the encoded window.
    pub contexts: Vec<Vec<f64>>,
    pub dropped_utterances: usize,
}

/// Encodes `dialogue` (oldest utterances dropped if needed) and measures I′
/// and I for its last utterance.
pub fn measure_last_turn<F: Real>(params: &ModelParams<F>, dialogue: &TokenizedDialogue) -> Result<LastTurn> {
    let e = encode_for_model(params.config(), dialogue, 0, 0)?;
    let n = e.num_utterances();
    if n == 0 {
        return Err(Error::Contract("dialogue has no utterances".into()));
    }
    let mut g = Graph::new();
    let b = Bound::new(&mut g, params);
    let out = forward(&mut g, &b, &e, &mut Mode::Eval)?;
    let to64 = |v: &[F]| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
    let predicted = to64(g.value(out.influences_pred).row(n - 1));
    let realized = to64(g.value(out.influences).row(n - 1));

    let logits = g.value(out.gen_logits);
    let mut nll = 0.0;
    let mut tokens = 0;
    for (row, &(p, k)) in out.gen_targets.iter().enumerate() {
        if k != n - 1 {
            continue;
        }
        let r: Vec<f64> = to64(logits.row(row));
        let mut lsm = vec![0.0; r.len()];
        crate::tensor::kernels::log_softmax_row(&r, &mut lsm);
        nll -= lsm[e.token_ids[p] as usize];
        tokens += 1;
    }
    Ok(LastTurn {
        predicted,
        realized,
        nll: nll / tokens as f64,
        tokens,
        contexts: g.value(out.contexts).to_rows().iter().map(|r| to64(r)).collect(),
        dropped_utterances: e.dropped_utterances,
    })
}

/// Maps log turns onto alternating model speakers: the first turn's role
/// speaks as `A`.
fn speaker_for(role: Role, first: Role) -> Speaker {
    if role == first {
        Speaker::A
    } else {
        Speaker::B
    }
}

/// Flow score of every bot turn of a conversation. Human turns only advance
/// the context.
pub fn score_log<F: Real>(log: &ConversationLog, params: &ModelParams<F>, vocab: &Vocab) -> Result<FlowReport> {
    let first = log
        .turns
        .first()
        .map(|t| t.speaker)
        .ok_or_else(|| Error::Evaluation("conversation has no turns".into()))?;
    let mut dialogue = TokenizedDialogue::empty(Speaker::A);
    let mut turns = Vec::new();
    let mut skipped = Vec::new();
    for (i, t) in log.turns.iter().enumerate() {
        let tokens = vocab.encode_text(&t.text);
        if tokens.is_empty() {
            log::warn!("turn {i}: no tokens, skipped");
            skipped.push(i);
            continue;
        }
        dialogue.push(speaker_for(t.speaker, first), tokens);
        if t.speaker == Role::Bot {
            let m = measure_last_turn(params, &dialogue)?;
            turns.push(TurnScore {
                turn: i,
                similarity: turn_similarity(&m.predicted, &m.realized),
                predicted_norm: m.predicted.iter().map(|x| x * x).sum::<f64>().sqrt(),
                realized_norm: m.realized.iter().map(|x| x * x).sum::<f64>().sqrt(),
                nll: m.nll,
                tokens: m.tokens,
            });
        }
    }
    if turns.is_empty() {
        return Err(Error::Evaluation("conversation has no scorable bot turns".into()));
    }
    let sims: Vec<f64> = turns.iter().map(|t| t.similarity).collect();
    let fs = flow_score(&sims)?;
    let baseline_perplexity = turns.iter().map(|t| t.nll.exp()).sum::<f64>() / turns.len() as f64;
    Ok(FlowReport {
        bot_id: log.bot_id.clone(),
        rating: log.rating,
        m: turns.len(),
        clamped_turns: fs.clamped.iter().map(|&i| turns[i].turn).collect(),
        turns,
        flow: fs.flow,
        baseline_perplexity,
        skipped_turns: skipped,
    })
}

/// Contexts of a whole conversation projected to 2-D, one point per context
/// of the (possibly truncated) encoded window. Empty turns are skipped.
pub fn log_trajectory<F: Real>(
    log: &ConversationLog,
    params: &ModelParams<F>,
    vocab: &Vocab,
) -> Result<Vec<TrajectoryPoint>> {
    let first = log
        .turns
        .first()
        .map(|t| t.speaker)
        .ok_or_else(|| Error::Evaluation("conversation has no turns".into()))?;
    let mut dialogue = TokenizedDialogue::empty(Speaker::A);
    let mut roles = Vec::new();
    for t in &log.turns {
        let tokens = vocab.encode_text(&t.text);
        if !tokens.is_empty() {
            dialogue.push(speaker_for(t.speaker, first), tokens);
            roles.push(t.speaker.label().to_string());
        }
    }
    let e = encode_for_model(params.config(), &dialogue, 0, 0)?;
    let mut g = Graph::new();
    let b = Bound::new(&mut g, params);
    let out = forward(&mut g, &b, &e, &mut Mode::Eval)?;
    let contexts: Vec<Vec<f64>> = g
        .value(out.contexts)
        .to_rows()
        .iter()
        .map(|r| r.iter().map(|x| x.as_f64()).collect())
        .collect();
    trajectory(&contexts, &roles[e.dropped_utterances..])
}

/// Scores logs in parallel; results are in input order.
pub fn score_logs<F: Real>(
    logs: &[ConversationLog],
    params: &ModelParams<F>,
    vocab: &Vocab,
) -> Vec<Result<FlowReport>> {
    logs.par_iter().map(|l| score_log(l, params, vocab)).collect()
}

/// Mean over bot turns of `exp(per-token NLL)`.
pub fn baseline_perplexity<F: Real>(log: &ConversationLog, params: &ModelParams<F>, vocab: &Vocab) -> Result<f64> {
    Ok(score_log(log, params, vocab)?.baseline_perplexity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BotRow {
    pub bot_id: String,
    pub conversations: usize,
    pub mean_flow: f64,
    pub mean_perplexity: f64,
    pub mean_rating: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatbotLevelEval {
    pub rows: Vec<BotRow>,
    /// Correlation of −flow with the mean rating across bots.
    pub flow_pearson: Correlation,
    pub flow_spearman: Correlation,
    /// Same for −perplexity; absent when undefined (e.g. constant means).
    pub perplexity_pearson: Option<Correlation>,
    pub perplexity_spearman: Option<Correlation>,
}

impl ChatbotLevelEval {
    /// Aligned plain-text table with a correlation footer.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>6} {:>10} {:>12} {:>8}\n",
            "bot", "convs", "flow", "perplexity", "rating"
        );
        for r in &self.rows {
            s += &format!(
                "{:<16} {:>6} {:>10.4} {:>12.4} {:>8.3}\n",
                r.bot_id, r.conversations, r.mean_flow, r.mean_perplexity, r.mean_rating
            );
        }
        let fmt = |c: &Option<Correlation>| match c {
            Some(c) => format!("{:.4} (p={:.3})", c.coefficient, c.p_value),
            None => "undefined".to_string(),
        };
        s += &format!(
            "flow        pearson {}  spearman {}\n",
            fmt(&Some(self.flow_pearson)),
            fmt(&Some(self.flow_spearman))
        );
        s += &format!(
            "perplexity  pearson {}  spearman {}\n",
            fmt(&self.perplexity_pearson),
            fmt(&self.perplexity_spearman)
        );
        s
    }
}

/// Groups reports by bot id, averages flow, perplexity and rating per bot,
/// and correlates the negated metrics with the ratings across bots.
/// Reports without a bot id or a rating are ignored.
pub fn chatbot_level_eval(reports: &[FlowReport]) -> Result<ChatbotLevelEval> {
    let mut groups: BTreeMap<&str, Vec<&FlowReport>> = BTreeMap::new();
    for r in reports {
        if let (Some(id), Some(_)) = (&r.bot_id, r.rating) {
            groups.entry(id).or_default().push(r);
        }
    }
    if groups.len() < 3 {
        return Err(Error::Evaluation(format!(
            "chatbot-level correlation needs at least 3 rated bots, got {}",
            groups.len()
        )));
    }
    let mean = |v: &[&FlowReport], f: fn(&FlowReport) -> f64| v.iter().map(|r| f(r)).sum::<f64>() / v.len() as f64;
    let rows: Vec<BotRow> = groups
        .iter()
        .map(|(id, v)| BotRow {
            bot_id: id.to_string(),
            conversations: v.len(),
            mean_flow: mean(v, |r| r.flow),
            mean_perplexity: mean(v, |r| r.baseline_perplexity),
            mean_rating: mean(v, |r| r.rating.unwrap_or(0.0)),
        })
        .collect();
    let rating: Vec<f64> = rows.iter().map(|r| r.mean_rating).collect();
    let neg_flow: Vec<f64> = rows.iter().map(|r| -r.mean_flow).collect();
    let neg_ppl: Vec<f64> = rows.iter().map(|r| -r.mean_perplexity).collect();
    Ok(ChatbotLevelEval {
        flow_pearson: pearson(&neg_flow, &rating)?,
        flow_spearman: spearman(&neg_flow, &rating)?,
        perplexity_pearson: pearson(&neg_ppl, &rating).ok(),
        perplexity_spearman: spearman(&neg_ppl, &rating).ok(),
        rows,
    })
}
