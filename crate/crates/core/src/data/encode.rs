use std::ops::Range;

use super::{DialogueSample, Speaker, Vocab, CTX_ID};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedUtterance {
    pub speaker: Speaker,
    pub tokens: Vec<u32>,
}

/// Dialogue as token ids, before `[C]` insertion and truncation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedDialogue {
    pub utterances: Vec<TokenizedUtterance>,
    /// Segment of the leading `[C]` when there are no utterances yet.
    pub opening_speaker: Speaker,
}

impl TokenizedDialogue {
    pub fn empty(opening_speaker: Speaker) -> Self {
        TokenizedDialogue {
            utterances: Vec::new(),
            opening_speaker,
        }
    }

    pub fn push(&mut self, speaker: Speaker, tokens: Vec<u32>) {
        self.utterances.push(TokenizedUtterance { speaker, tokens });
    }

    /// Speaker of the next utterance under strict alternation.
    pub fn next_speaker(&self) -> Speaker {
        self.utterances
            .last()
            .map(|u| u.speaker.other())
            .unwrap_or(self.opening_speaker)
    }
}

pub fn tokenize_dialogue(sample: &DialogueSample, vocab: &Vocab) -> TokenizedDialogue {
    TokenizedDialogue {
        utterances: sample
            .utterances()
            .iter()
            .map(|u| TokenizedUtterance {
                speaker: u.speaker,
                tokens: vocab.encode_text(&u.text),
            })
            .collect(),
        opening_speaker: sample.utterances().first().map(|u| u.speaker).unwrap_or(Speaker::A),
    }
}

/// `[C] u₁ [C] u₂ [C] … u_N [C]` with per-token segment and position ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDialogue {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    /// Indices of the N+1 `[C]` tokens.
    pub context_positions: Vec<usize>,
    /// Half-open range per utterance, including its terminating `[C]`.
    pub utterance_spans: Vec<Range<usize>>,
    /// Positions that are generation targets.
    pub loss_mask: Vec<bool>,
    pub speakers: Vec<Speaker>,
    /// Number of leading real (non-padding) positions.
    pub valid_len: usize,
    /// Oldest utterances removed to fit `max_positions`.
    pub dropped_utterances: usize,
}

impl EncodedDialogue {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Utterance count N.
    pub fn num_utterances(&self) -> usize {
        self.utterance_spans.len()
    }

    /// `(target position, utterance index)` for every generation target, in
    /// position order.
    pub fn generation_targets(&self) -> Vec<(usize, usize)> {
        self.utterance_spans
            .iter()
            .enumerate()
            .flat_map(|(k, span)| span.clone().map(move |p| (p, k)))
            .filter(|&(p, _)| self.loss_mask[p])
            .collect()
    }

    /// Tokens of utterance `k` without its terminating `[C]`.
    pub fn content_tokens(&self, k: usize) -> &[u32] {
        let span = &self.utterance_spans[k];
        &self.token_ids[span.start..span.end - 1]
    }

    pub fn ends_with_context(&self) -> bool {
        self.valid_len > 0 && self.token_ids[self.valid_len - 1] == CTX_ID
    }
}

fn encoded_len(utts: &[TokenizedUtterance]) -> usize {
    1 + utts.iter().map(|u| u.tokens.len() + 1).sum::<usize>()
}

/// Encodes a tokenized dialogue, dropping the oldest whole utterances until it
/// fits in `max_positions` while keeping at least two (or all, if fewer).
pub fn encode_tokenized(dialogue: &TokenizedDialogue, max_positions: usize) -> Result<EncodedDialogue> {
    let utts = &dialogue.utterances;
    let keep_min = utts.len().min(2);
    let mut first = 0;
    while encoded_len(&utts[first..]) > max_positions && utts.len() - first > keep_min {
        first += 1;
    }
    let kept = &utts[first..];
    let len = encoded_len(kept);
    if len > max_positions {
        return Err(Error::Encoding(format!(
            "dialogue needs {len} positions for its last {} utterance(s), limit is {max_positions}",
            kept.len()
        )));
    }

    let leading_segment = kept
        .first()
        .map(|u| u.speaker)
        .unwrap_or(dialogue.opening_speaker)
        .segment();
    let mut token_ids = Vec::with_capacity(len);
    let mut segment_ids = Vec::with_capacity(len);
    let mut context_positions = vec![0];
    let mut utterance_spans = Vec::with_capacity(kept.len());
    let mut loss_mask = Vec::with_capacity(len);
    token_ids.push(CTX_ID);
    segment_ids.push(leading_segment);
    loss_mask.push(false);
    for u in kept {
        let start = token_ids.len();
        for &t in u.tokens.iter().chain(std::iter::once(&CTX_ID)) {
            token_ids.push(t);
            segment_ids.push(u.speaker.segment());
            loss_mask.push(true);
        }
        context_positions.push(token_ids.len() - 1);
        utterance_spans.push(start..token_ids.len());
    }
    Ok(EncodedDialogue {
        position_ids: (0..len).collect(),
        valid_len: len,
        token_ids,
        segment_ids,
        context_positions,
        utterance_spans,
        loss_mask,
        speakers: kept.iter().map(|u| u.speaker).collect(),
        dropped_utterances: first,
    })
}

pub fn encode_dialogue(sample: &DialogueSample, vocab: &Vocab, max_positions: usize) -> Result<EncodedDialogue> {
    encode_tokenized(&tokenize_dialogue(sample, vocab), max_positions)
}
