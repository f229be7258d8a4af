#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dialoflow_cli::commands::LoadedModel;
use dialoflow_cli::server::{router, AppState, ServerConfig};
use dialoflow_core::data::{write_corpus, DialogueSample, Vocab};
use dialoflow_core::model::{ModelConfig, ModelParams};
use dialoflow_core::synthetic::template_dialogues;
use dialoflow_core::training::{checkpoint_hash, encode_corpus, TrainConfig, Trainer};

pub fn small_config(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab.len(),
        max_positions: 256,
        max_utterances: 32,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn corpus() -> Vec<DialogueSample> {
    template_dialogues(12, 3, 6, 21)
}

/// A briefly trained small model, as a checkpoint file and in memory.
pub fn small_model(dir: &Path) -> (PathBuf, LoadedModel) {
    let samples = corpus();
    let vocab = Vocab::build(&samples, 1, 100).unwrap();
    let config = small_config(&vocab);
    let rows = encode_corpus(&samples, &vocab, &config).unwrap();
    let params = ModelParams::<f32>::init(config, 5).unwrap();
    let mut trainer = Trainer::new(
        params,
        vocab,
        rows,
        TrainConfig {
            peak_lr: 1e-2,
            warmup_steps: 5,
            total_steps: 40,
            batch_size: 12,
            seed: 3,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    for _ in 0..40 {
        trainer.step().unwrap();
    }
    let ckpt = trainer.checkpoint();
    let path = dir.join("model.dflw");
    ckpt.save(&path).unwrap();
    let hash = checkpoint_hash(&std::fs::read(&path).unwrap()).unwrap();
    let model = LoadedModel {
        params: ckpt.params,
        vocab: ckpt.vocab,
        hash,
    };
    (path, model)
}

pub fn write_samples(path: &Path, samples: &[DialogueSample]) {
    write_corpus(std::fs::File::create(path).unwrap(), samples).unwrap();
}

/// Serves `model` on an ephemeral port and returns its base URL.
pub async fn spawn_server(model: LoadedModel, config: ServerConfig) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(AppState::new(model, config));
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    format!("http://{addr}")
}

pub fn dialoflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dialoflow"))
        .args(args)
        .env_remove("DIALOFLOW_CKPT")
        .output()
        .unwrap()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
