//! Corpus ingestion, vocabulary and whole-dialogue encoding.

mod batch;
mod corpus;
mod encode;
mod vocab;

use serde::{Deserialize, Serialize};

pub use batch::{batch_dialogues, Batch};
pub use corpus::{load_corpus, parse_corpus, write_corpus, CorpusLoad, MalformedLine, MAX_MALFORMED_FRACTION};
pub use encode::{
    encode_dialogue, encode_tokenized, tokenize_dialogue, EncodedDialogue, TokenizedDialogue, TokenizedUtterance,
};
pub use vocab::{
    decode_tokens, tokenize, Vocab, CTX_ID, NUM_RESERVED, PAD_ID, RESERVED_TOKENS, SPEAKER1_ID, SPEAKER2_ID, UNK_ID,
    UNK_LITERAL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    /// Segment id: `[Speaker1]` = 0, `[Speaker2]` = 1.
    pub fn segment(self) -> usize {
        match self {
            Speaker::A => 0,
            Speaker::B => 1,
        }
    }

    pub fn other(self) -> Speaker {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Utterance {
            speaker,
            text: text.into(),
        }
    }
}

/// A whole dialogue with strictly alternating speakers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueSample {
    utterances: Vec<Utterance>,
}

impl DialogueSample {
    /// Normalizes raw turns: blank turns are dropped and consecutive turns by
    /// the same speaker are merged with a single space.
    pub fn new(turns: impl IntoIterator<Item = Utterance>) -> Self {
        let mut utterances: Vec<Utterance> = Vec::new();
        for turn in turns {
            let text = turn.text.trim();
            if text.is_empty() {
                continue;
            }
            match utterances.last_mut() {
                Some(last) if last.speaker == turn.speaker => {
                    last.text.push(' ');
                    last.text.push_str(text);
                }
                _ => utterances.push(Utterance::new(turn.speaker, text)),
            }
        }
        DialogueSample { utterances }
    }

    /// Builds an alternating dialogue starting with speaker A.
    pub fn alternating<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut speaker = Speaker::A;
        DialogueSample::new(texts.iter().map(|t| {
            let u = Utterance::new(speaker, t.as_ref());
            speaker = speaker.other();
            u
        }))
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn push(&mut self, utterance: Utterance) {
        *self = DialogueSample::new(self.utterances.drain(..).chain([utterance]));
    }
}
