//! Implementations of the `dialoflow` subcommands. Each returns the text it
//! would print on stdout.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use dialoflow_core::data::{load_corpus, Speaker, TokenizedDialogue, Vocab};
use dialoflow_core::flow_score::{chatbot_level_eval, log_trajectory, parse_logs, score_logs, ConversationLog};
use dialoflow_core::generation::{respond, DecodeConfig, Strategy};
use dialoflow_core::metrics::{evaluate_testset, load_testset};
use dialoflow_core::model::{ModelConfig, ModelParams};
use dialoflow_core::tensor::Precision;
use dialoflow_core::training::{encode_corpus, Checkpoint, RunSummary, TrainConfig, Trainer};
use dialoflow_core::{Real, Result as CoreResult};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_freq: 1,
            max_size: 30_000,
        }
    }
}

/// Contents of the `--config` file of `train`. The model's `vocab_size` is
/// taken from the vocabulary built on the corpus.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: VocabConfig,
    pub init_seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = read(path)?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Data(format!("{}: {} at {}", path.display(), e.inner(), e.path())))
    }
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

pub struct TrainArgs<'a> {
    pub corpus: &'a Path,
    pub config: &'a Path,
    pub out: &'a Path,
    pub validation: Option<&'a Path>,
    pub resume: Option<&'a Path>,
}

fn load_samples(path: &Path) -> CliResult<Vec<dialoflow_core::data::DialogueSample>> {
    let load = load_corpus(path)?;
    if !load.malformed.is_empty() {
        log::warn!("{}: skipped {} malformed lines", path.display(), load.malformed.len());
    }
    Ok(load.samples)
}

fn run_trainer<F: Real>(
    mut trainer: Trainer<F>,
    validation: &[dialoflow_core::data::EncodedDialogue],
    out: &Path,
    append: bool,
) -> CoreResult<RunSummary> {
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let path = out.join("metrics.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&path)
        .map_err(|e| io_error(&path, e))?;
    trainer.run(validation, Some(out), Some(&mut log))
}

fn io_error(path: &Path, source: std::io::Error) -> dialoflow_core::Error {
    dialoflow_core::Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Trains a model and writes checkpoints plus `metrics.jsonl` into `out`.
pub fn train(args: &TrainArgs) -> CliResult<String> {
    let run = RunConfig::load(args.config)?;
    let samples = load_samples(args.corpus)?;
    let (summary, precision) = if let Some(resume) = args.resume {
        let ckpt = Checkpoint::load(resume)?;
        let config = ckpt.params.config().clone();
        let rows = encode_corpus(&samples, &ckpt.vocab, &config)?;
        let valid = match args.validation {
            Some(p) => encode_corpus(&load_samples(p)?, &ckpt.vocab, &config)?,
            None => Vec::new(),
        };
        let summary = match config.precision {
            Precision::F32 => run_trainer(
                Trainer::<f32>::resume(&ckpt, rows, Some(run.train))?,
                &valid,
                args.out,
                true,
            )?,
            Precision::F64 => run_trainer(
                Trainer::<f64>::resume(&ckpt, rows, Some(run.train))?,
                &valid,
                args.out,
                true,
            )?,
        };
        (summary, config.precision)
    } else {
        let vocab = Vocab::build(&samples, run.vocab.min_freq, run.vocab.max_size)?;
        let config = ModelConfig {
            vocab_size: vocab.len(),
            ..run.model
        };
        config.validate()?;
        let rows = encode_corpus(&samples, &vocab, &config)?;
        let valid = match args.validation {
            Some(p) => encode_corpus(&load_samples(p)?, &vocab, &config)?,
            None => Vec::new(),
        };
        let summary = match config.precision {
            Precision::F32 => {
                let params = ModelParams::<f32>::init(config.clone(), run.init_seed)?;
                run_trainer(Trainer::new(params, vocab, rows, run.train)?, &valid, args.out, false)?
            }
            Precision::F64 => {
                let params = ModelParams::<f64>::init(config.clone(), run.init_seed)?;
                run_trainer(Trainer::new(params, vocab, rows, run.train)?, &valid, args.out, false)?
            }
        };
        (summary, config.precision)
    };
    log::info!("trained in {precision:?}");
    Ok(serde_json::to_string_pretty(&summary).map_err(|e| CliError::Internal(e.to_string()))? + "\n")
}

/// A checkpoint ready for inference.
pub struct LoadedModel {
    pub params: ModelParams<f32>,
    pub vocab: Vocab,
    pub hash: String,
}

pub fn load_model(path: &Path) -> CliResult<LoadedModel> {
    let (ckpt, hash) = Checkpoint::load_with_hash(path)?;
    Ok(LoadedModel {
        params: ckpt.params,
        vocab: ckpt.vocab,
        hash,
    })
}

/// Decoding flags shared by `generate` and `eval`.
#[derive(Debug, Clone, Copy, Default)]
pub struct DecodeArgs {
    pub beam: Option<usize>,
    pub max_tokens: Option<usize>,
    pub alpha: Option<f64>,
}

impl DecodeArgs {
    pub fn to_config(self) -> CliResult<DecodeConfig> {
        let mut c = match self.beam {
            Some(w) => DecodeConfig::beam(w),
            None => DecodeConfig::greedy(),
        };
        if let Some(n) = self.max_tokens {
            c.max_new_tokens = n;
        }
        if let Some(a) = self.alpha {
            c.length_alpha = a;
        }
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }
}

/// Replies to a JSON array of turns (the first spoken by `A`).
pub fn generate(model: &LoadedModel, context_json: &str, decode: DecodeArgs) -> CliResult<String> {
    let context: Vec<String> = serde_json::from_str(context_json)
        .map_err(|e| CliError::Usage(format!("--context must be a JSON array of strings: {e}")))?;
    let config = decode.to_config()?;
    let mut history = TokenizedDialogue::empty(Speaker::A);
    let mut speaker = Speaker::A;
    for turn in &context {
        history.push(speaker, model.vocab.encode_text(turn));
        speaker = speaker.other();
    }
    let response = respond(&model.params, &history, &config)?;
    if config.strategy == Strategy::Beam {
        log::info!("{} hypotheses", response.hypotheses.len());
    }
    Ok(model.vocab.decode(response.best().content()) + "\n")
}

fn load_logs(path: &Path) -> CliResult<Vec<ConversationLog>> {
    Ok(parse_logs(&read(path)?)?)
}

/// One FlowReport JSON line per log, optionally followed by the chatbot-level
/// table.
pub fn score(model: &LoadedModel, logs: &Path, with_correlation: bool) -> CliResult<String> {
    let logs = load_logs(logs)?;
    if logs.is_empty() {
        return Err(CliError::Data("no conversation logs".into()));
    }
    let mut reports = Vec::with_capacity(logs.len());
    for (i, r) in score_logs(&logs, &model.params, &model.vocab).into_iter().enumerate() {
        reports.push(r.map_err(|e| CliError::Data(format!("log {}: {e}", i + 1)))?);
    }
    let mut out = String::new();
    for r in &reports {
        out += &serde_json::to_string(r).map_err(|e| CliError::Internal(e.to_string()))?;
        out.push('\n');
    }
    if with_correlation {
        out.push('\n');
        out += &chatbot_level_eval(&reports)?.to_table();
    }
    Ok(out)
}

/// Decodes every test case and prints the metric table.
pub fn eval(
    model: &LoadedModel,
    testset: &Path,
    decode: DecodeArgs,
    label: &str,
    hypotheses: Option<&Path>,
) -> CliResult<String> {
    let cases = load_testset(testset)?;
    let report = evaluate_testset(&model.params, &model.vocab, &cases, &decode.to_config()?)?;
    if let Some(path) = hypotheses {
        let mut f = File::create(path).map_err(|e| io_error(path, e))?;
        for h in &report.hypotheses {
            writeln!(f, "{h}").map_err(|e| io_error(path, e))?;
        }
    }
    Ok(report.metrics.to_table(label) + "\n")
}

/// Writes the PCA-projected contexts of one log as `{"points": [...]}`.
pub fn project_flow(model: &LoadedModel, log: &Path, index: usize, out: &Path) -> CliResult<String> {
    let logs = load_logs(log)?;
    let chosen = logs
        .get(index)
        .ok_or_else(|| CliError::Data(format!("{} holds {} logs, no index {index}", log.display(), logs.len())))?;
    let points = log_trajectory(chosen, &model.params, &model.vocab)?;
    let json = serde_json::json!({ "points": points });
    std::fs::write(
        out,
        serde_json::to_string_pretty(&json).map_err(|e| CliError::Internal(e.to_string()))?,
    )
    .map_err(|e| io_error(out, e))?;
    Ok(format!("wrote {} points to {}\n", points.len(), out.display()))
}
