use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::DialogueSample;
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CTX_ID: u32 = 2;
pub const SPEAKER1_ID: u32 = 3;
pub const SPEAKER2_ID: u32 = 4;
pub const NUM_RESERVED: usize = 5;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[C]", "[SPEAKER1]", "[SPEAKER2]"];

/// Text emitted for `[UNK]` by [`decode_tokens`].
pub const UNK_LITERAL: &str = "<unk>";

/// Lowercases, pads ASCII punctuation with spaces and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut padded = String::with_capacity(text.len() + 8);
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_ascii_punctuation() {
            padded.push(' ');
            padded.push(ch);
            padded.push(' ');
        } else {
            padded.push(ch);
        }
    }
    padded.split_whitespace().map(str::to_owned).collect()
}

/// Word-level vocabulary. Ids 0..5 are the reserved tokens in
/// [`RESERVED_TOKENS`] order; corpus tokens follow by descending frequency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from corpus tokens given in id order (reserved
    /// tokens excluded).
    pub fn from_tokens(corpus_tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(corpus_tokens);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Corpus(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Corpus(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Tokens with frequency ≥ `min_freq`, most frequent first with ties in
    /// lexicographic order. `max_size` caps the total size including the
    /// reserved tokens.
    pub fn build(corpus: &[DialogueSample], min_freq: usize, max_size: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for sample in corpus {
            for u in sample.utterances() {
                for tok in tokenize(&u.text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        if counts.is_empty() {
            return Err(Error::Corpus("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut entries: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq.max(1)).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(max_size.saturating_sub(NUM_RESERVED));
        Vocab::from_tokens(entries.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Corpus tokens in id order, without the reserved prefix.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        decode_tokens(ids, self)
    }

    /// One token per line; the first five lines are the reserved tokens so the
    /// zero-based line number equals the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_RESERVED || lines[..NUM_RESERVED] != RESERVED_TOKENS {
            return Err(Error::Corpus(format!(
                "{}: vocabulary file must start with the reserved tokens {RESERVED_TOKENS:?}",
                path.display()
            )));
        }
        Vocab::from_tokens(lines[NUM_RESERVED..].iter().map(|s| s.to_string()))
    }
}

/// Joins tokens with single spaces. Reserved tokens are dropped, except
/// `[UNK]` which is rendered as [`UNK_LITERAL`].
pub fn decode_tokens(ids: &[u32], vocab: &Vocab) -> String {
    let mut words: Vec<&str> = Vec::with_capacity(ids.len());
    for &id in ids {
        if id == UNK_ID {
            words.push(UNK_LITERAL);
        } else if (id as usize) < NUM_RESERVED {
            continue;
        } else if let Some(t) = vocab.token(id) {
            words.push(t);
        } else {
            words.push(UNK_LITERAL);
        }
    }
    words.join(" ")
}
