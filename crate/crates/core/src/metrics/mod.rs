//! Reference-based generation metrics: corpus BLEU and NIST with multiple
//! references, n-gram entropy and average length, plus a test-set driver.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;
use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize, Speaker, TokenizedDialogue, Vocab};
use crate::error::{Error, Result};
use crate::generation::{respond, DecodeConfig};
use crate::model::ModelParams;
use crate::tensor::Real;

/// One hypothesis with its references.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCase<T> {
    pub hypothesis: Vec<T>,
    pub references: Vec<Vec<T>>,
}

impl<T> EvalCase<T> {
    /// An empty hypothesis is allowed (a model may close its reply at once);
    /// references must be present and nonempty.
    pub fn new(hypothesis: Vec<T>, references: Vec<Vec<T>>) -> Result<Self> {
        if references.is_empty() || references.iter().any(|r| r.is_empty()) {
            return Err(Error::Evaluation(
                "every case needs at least one nonempty reference".into(),
            ));
        }
        Ok(EvalCase { hypothesis, references })
    }
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Hypothesis n-gram counts clipped by their largest count in any reference,
/// in order of first occurrence in the hypothesis, and the number of
/// hypothesis n-grams.
fn clipped_matches<T: Hash + Eq>(case: &EvalCase<T>, n: usize) -> (Vec<(&[T], usize)>, usize) {
    let hyp = ngram_counts(&case.hypothesis, n);
    let total = hyp.values().sum();
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in &case.references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let mut seen = HashSet::new();
    let mut matched = Vec::new();
    if case.hypothesis.len() >= n {
        for g in case.hypothesis.windows(n) {
            if seen.insert(g) {
                if let Some(&m) = max_ref.get(g) {
                    matched.push((g, hyp[g].min(m)));
                }
            }
        }
    }
    (matched, total)
}

fn check_order<T>(cases: &[EvalCase<T>], n: usize) -> Result<()> {
    if cases.is_empty() {
        return Err(Error::Evaluation("no cases to score".into()));
    }
    if n == 0 {
        return Err(Error::Evaluation("n-gram order must be at least 1".into()));
    }
    Ok(())
}

/// Corpus BLEU-n: clipped n-gram precisions for orders 1..=n, uniform
/// geometric mean, brevity penalty against the closest reference length
/// (shorter on ties). No smoothing: an order without matches gives 0.
pub fn bleu<T: Hash + Eq>(cases: &[EvalCase<T>], n: usize) -> Result<f64> {
    check_order(cases, n)?;
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for case in cases {
            let (m, t) = clipped_matches(case, order);
            matched += m.iter().map(|(_, c)| c).sum::<usize>();
            total += t;
        }
        if total == 0 {
            log::warn!("BLEU-{n}: no hypothesis has {order}-grams; score is 0");
            return Ok(0.0);
        }
        if matched == 0 {
            log::warn!("BLEU-{n}: no matching {order}-grams; score is 0");
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let hyp_len: usize = cases.iter().map(|c| c.hypothesis.len()).sum();
    let ref_len: usize = cases
        .iter()
        .map(|c| {
            let h = c.hypothesis.len();
            c.references
                .iter()
                .map(|r| r.len())
                .min_by_key(|&r| (r.abs_diff(h), r))
                .expect("references are nonempty")
        })
        .sum();
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_sum / n as f64).exp())
}

/// NIST length factor: 1 at or above the reference length, 0.5 at two
/// thirds of it.
fn nist_brevity(ratio: f64) -> f64 {
    if ratio >= 1.0 {
        return 1.0;
    }
    if ratio <= 0.0 {
        return 0.0;
    }
    let beta = -(0.5f64.ln()) / 1.5f64.ln().powi(2);
    (-beta * ratio.ln().powi(2)).exp()
}

/// Corpus NIST-n (Doddington). Each n-gram carries
/// `log2(count(w1..w_{n-1}) / count(w1..w_n))` counted over all references
/// (the unigram prefix count is the number of reference words). Per order,
/// the information of clipped matches is divided by the number of hypothesis
/// n-grams; orders are summed and scaled by the length factor of total
/// hypothesis length over total mean reference length.
pub fn nist<T: Hash + Eq>(cases: &[EvalCase<T>], n: usize) -> Result<f64> {
    check_order(cases, n)?;
    let mut ref_counts: HashMap<&[T], usize> = HashMap::new();
    let mut ref_words = 0usize;
    for case in cases {
        for r in &case.references {
            ref_words += r.len();
            for order in 1..=n {
                for (g, c) in ngram_counts(r, order) {
                    *ref_counts.entry(g).or_insert(0) += c;
                }
            }
        }
    }
    let info = |g: &[T]| {
        let prefix = if g.len() == 1 {
            ref_words
        } else {
            ref_counts[&g[..g.len() - 1]]
        };
        (prefix as f64 / ref_counts[g] as f64).log2()
    };

    let mut score = 0.0;
    for order in 1..=n {
        let (mut gained, mut total) = (0.0, 0usize);
        for case in cases {
            let (matched, t) = clipped_matches(case, order);
            gained += matched.iter().map(|&(g, c)| c as f64 * info(g)).sum::<f64>();
            total += t;
        }
        if total > 0 {
            score += gained / total as f64;
        }
    }
    let hyp_len: usize = cases.iter().map(|c| c.hypothesis.len()).sum();
    let ref_len: f64 = cases
        .iter()
        .map(|c| c.references.iter().map(|r| r.len()).sum::<usize>() as f64 / c.references.len() as f64)
        .sum();
    Ok(score * nist_brevity(hyp_len as f64 / ref_len))
}

/// Entropy (natural log) of the pooled order-`n` gram distribution.
pub fn entropy<T: Hash + Eq, H: AsRef<[T]>>(hypotheses: &[H], n: usize) -> f64 {
    let mut counts: HashMap<&[T], usize> = HashMap::new();
    for h in hypotheses {
        for (g, c) in ngram_counts(h.as_ref(), n) {
            *counts.entry(g).or_insert(0) += c;
        }
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return 0.0;
    }
    let mut values: Vec<usize> = counts.into_values().collect();
    values.sort_unstable();
    values
        .iter()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0)
}

pub fn avg_len<T, H: AsRef<[T]>>(hypotheses: &[H]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Evaluation("average length of an empty set".into()));
    }
    Ok(hypotheses.iter().map(|h| h.as_ref().len()).sum::<usize>() as f64 / hypotheses.len() as f64)
}

/// The standard metric columns for a set of cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub nist2: f64,
    pub nist4: f64,
    pub bleu2: f64,
    pub bleu4: f64,
    pub entropy4: f64,
    pub avg_len: f64,
}

impl MetricRow {
    pub fn compute<T: Hash + Eq>(cases: &[EvalCase<T>]) -> Result<Self> {
        let hyps: Vec<&[T]> = cases.iter().map(|c| c.hypothesis.as_slice()).collect();
        Ok(MetricRow {
            nist2: nist(cases, 2)?,
            nist4: nist(cases, 4)?,
            bleu2: bleu(cases, 2)?,
            bleu4: bleu(cases, 4)?,
            entropy4: entropy(&hyps, 4),
            avg_len: avg_len(&hyps)?,
        })
    }

    /// Two-line aligned table (header and values).
    pub fn to_table(&self, label: &str) -> String {
        let w = label.len().max(6);
        format!(
            "{:<w$}  {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n{:<w$}  {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.2}\n",
            "method",
            "NIST-2",
            "NIST-4",
            "BLEU-2",
            "BLEU-4",
            "Entropy",
            "AvgLen",
            label,
            self.nist2,
            self.nist4,
            self.bleu2,
            self.bleu4,
            self.entropy4,
            self.avg_len,
        )
    }
}

/// One line of a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    /// Alternating turns, the first spoken by `A`.
    pub context: Vec<String>,
    pub references: Vec<String>,
}

pub fn parse_testset(reader: impl Read) -> Result<Vec<TestCase>> {
    let mut text = String::new();
    let mut reader = reader;
    reader
        .read_to_string(&mut text)
        .map_err(|e| Error::io(Path::new("<testset>"), e))?;
    let cases = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<TestCase>(l).map_err(|e| Error::Evaluation(format!("testset line {}: {e}", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(cases)
}

pub fn load_testset(path: &Path) -> Result<Vec<TestCase>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_testset(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestsetReport {
    pub metrics: MetricRow,
    pub hypotheses: Vec<String>,
}

/// Decodes a reply for every context and scores the replies against the
/// references.
pub fn evaluate_testset<F: Real>(
    params: &ModelParams<F>,
    vocab: &Vocab,
    cases: &[TestCase],
    decode: &DecodeConfig,
) -> Result<TestsetReport> {
    if cases.is_empty() {
        return Err(Error::Evaluation("test set is empty".into()));
    }
    let replies: Vec<Vec<String>> = cases
        .par_iter()
        .map(|case| {
            let mut history = TokenizedDialogue::empty(Speaker::A);
            let mut speaker = Speaker::A;
            for turn in &case.context {
                history.push(speaker, vocab.encode_text(turn));
                speaker = speaker.other();
            }
            let response = respond(params, &history, decode)?;
            Ok(response
                .best()
                .content()
                .iter()
                .map(|&t| vocab.token(t).unwrap_or_default().to_string())
                .collect())
        })
        .collect::<Result<_>>()?;
    let scored = cases
        .iter()
        .zip(&replies)
        .map(|(c, h)| EvalCase::new(h.clone(), c.references.iter().map(|r| tokenize(r)).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(TestsetReport {
        metrics: MetricRow::compute(&scored)?,
        hypotheses: replies.iter().map(|h| h.join(" ")).collect(),
    })
}
