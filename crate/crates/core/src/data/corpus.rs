use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DialogueSample, Speaker, Utterance};
use crate::error::{Error, Result};

/// Corpora with a larger share of malformed lines are rejected.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    dialogue: Vec<Turn>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Turn {
    speaker: Speaker,
    text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedLine {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct CorpusLoad {
    pub samples: Vec<DialogueSample>,
    pub malformed: Vec<MalformedLine>,
}

/// Writes samples in the line-delimited format read by [`parse_corpus`].
pub fn write_corpus(mut writer: impl Write, samples: &[DialogueSample]) -> Result<()> {
    for s in samples {
        let rec = Record {
            dialogue: s
                .utterances()
                .iter()
                .map(|u| Turn {
                    speaker: u.speaker,
                    text: u.text.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut writer, &rec)?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::Corpus(format!("write failed: {e}")))?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<CorpusLoad> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(file).map_err(|e| match e {
        Error::Corpus(msg) => Error::Corpus(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses line-delimited `{"dialogue":[{"speaker":"A"|"B","text":...}]}`
/// records. Blank lines are ignored; lines that fail to parse or normalize to
/// fewer than two utterances are skipped and reported.
pub fn parse_corpus(reader: impl Read) -> Result<CorpusLoad> {
    let mut samples = Vec::new();
    let mut malformed = Vec::new();
    let mut records = 0usize;
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::Corpus(format!("read failed at line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        records += 1;
        let reason = match serde_json::from_str::<Record>(&line) {
            Err(e) => e.to_string(),
            Ok(rec) => {
                let sample = DialogueSample::new(rec.dialogue.into_iter().map(|t| Utterance::new(t.speaker, t.text)));
                if sample.len() >= 2 {
                    samples.push(sample);
                    continue;
                }
                format!("dialogue has {} utterance(s) after normalization, need 2", sample.len())
            }
        };
        log::warn!("corpus line {}: skipped ({reason})", i + 1);
        malformed.push(MalformedLine { line: i + 1, reason });
    }
    if records > 0 && malformed.len() as f64 > MAX_MALFORMED_FRACTION * records as f64 {
        return Err(Error::Corpus(format!(
            "{} of {records} lines malformed (first at line {})",
            malformed.len(),
            malformed[0].line
        )));
    }
    Ok(CorpusLoad { samples, malformed })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{"dialogue":[{"speaker":"A","text":"hi"},{"speaker":"B","text":"hello"}]}"#;

    #[test]
    fn parses_a_two_turn_line() {
        let load = parse_corpus(GOOD.as_bytes()).unwrap();
        assert_eq!(load.samples.len(), 1);
        assert_eq!(load.samples[0].len(), 2);
    }

    #[test]
    fn written_corpus_parses_back() {
        let samples = vec![
            DialogueSample::alternating(&["a b", "c"]),
            DialogueSample::alternating(&["x", "y", "z"]),
        ];
        let mut buf = Vec::new();
        write_corpus(&mut buf, &samples).unwrap();
        assert_eq!(parse_corpus(buf.as_slice()).unwrap().samples, samples);
    }

    #[test]
    fn same_speaker_turns_are_merged() {
        let line =
            r#"{"dialogue":[{"speaker":"A","text":"hi"},{"speaker":"A","text":"there"},{"speaker":"B","text":"yo"}]}"#;
        let load = parse_corpus(line.as_bytes()).unwrap();
        assert_eq!(load.samples[0].utterances()[0].text, "hi there");
    }

    #[test]
    fn empty_dialogue_is_counted_malformed() {
        let mut text = String::new();
        for _ in 0..10 {
            text.push_str(GOOD);
            text.push('\n');
        }
        text.push_str(r#"{"dialogue":[]}"#);
        let load = parse_corpus(text.as_bytes()).unwrap();
        assert_eq!(load.samples.len(), 10);
        assert_eq!(load.malformed.len(), 1);
        assert_eq!(load.malformed[0].line, 11);
    }

    #[test]
    fn too_many_malformed_lines_reject_the_corpus() {
        let text = format!("{GOOD}\nnot json\n{GOOD}\n");
        assert!(matches!(parse_corpus(text.as_bytes()), Err(Error::Corpus(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_corpus(Path::new("/definitely/not/here.jsonl")),
            Err(Error::Io { .. })
        ));
    }
}
