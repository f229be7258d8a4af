//! Fixtures shared by the benchmarks.

use dialoflow_core::data::{DialogueSample, EncodedDialogue, Vocab};
use dialoflow_core::model::{ModelConfig, ModelParams};
use dialoflow_core::synthetic::template_dialogues;
use dialoflow_core::training::encode_corpus;

pub struct Fixture {
    pub samples: Vec<DialogueSample>,
    pub vocab: Vocab,
    pub rows: Vec<EncodedDialogue>,
    pub params: ModelParams<f32>,
}

/// A model of width `d_model` and a template corpus of `dialogues` dialogues.
pub fn fixture(d_model: usize, dialogues: usize) -> Fixture {
    let samples = template_dialogues(dialogues, 4, 12, 1);
    let vocab = Vocab::build(&samples, 1, 1000).expect("vocabulary");
    let config = ModelConfig {
        d_model,
        n_layers: 2,
        n_heads: 4,
        d_ff: 4 * d_model,
        vocab_size: vocab.len(),
        max_positions: 128,
        max_utterances: 32,
        dropout: 0.1,
        ..ModelConfig::default()
    };
    let rows = encode_corpus(&samples, &vocab, &config).expect("encoding");
    let params = ModelParams::init(config, 1).expect("parameters");
    Fixture {
        samples,
        vocab,
        rows,
        params,
    }
}
