use dialoflow_core::data::{
    encode_tokenized, tokenize_dialogue, Batch, EncodedDialogue, Speaker, TokenizedDialogue, Vocab, PAD_ID,
};
use dialoflow_core::model::{forward, Bound, Mode, ModelConfig, ModelParams};
use dialoflow_core::synthetic::template_dialogues;
use dialoflow_core::tensor::{analytic_gradients, grad_check, GradCheckConfig};
use dialoflow_core::training::{
    encode_corpus, loss_and_grads, loss_cfm, loss_sim, total_loss, Checkpoint, LossNormalization, ObjectiveConfig,
    StepLog, TrainConfig, Trainer,
};
use dialoflow_core::{Error, Graph, Tensor};
use proptest::prelude::*;

fn toy(n: usize, seed: u64) -> (Vocab, ModelConfig, Vec<EncodedDialogue>) {
    let corpus = template_dialogues(n, 3, 6, seed);
    let vocab = Vocab::build(&corpus, 1, 1000).unwrap();
    let config = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab.len(),
        max_positions: 64,
        max_utterances: 8,
        dropout: 0.1,
        ..ModelConfig::default()
    };
    let rows = encode_corpus(&corpus, &vocab, &config).unwrap();
    (vocab, config, rows)
}

fn train_config(steps: u64) -> TrainConfig {
    TrainConfig {
        peak_lr: 3e-3,
        warmup_steps: 3,
        total_steps: steps,
        batch_size: 3,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn batch(rows: &[EncodedDialogue], width: usize) -> Batch {
    Batch::pad(rows, width, PAD_ID)
}

fn log_bits(l: &StepLog) -> [u64; 5] {
    [l.lr, l.l_cfm, l.l_sim, l.l_rgm, l.total].map(f64::to_bits)
}

#[test]
fn cfm_single_pair() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::from_rows(&[vec![9.0, 9.0], vec![1.0, 2.0]]).unwrap());
    let p = g.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
    let l = loss_cfm(&mut g, c, p, false).unwrap();
    assert_eq!(g.value(l).item(), 5.0);

    let p = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let l = loss_cfm(&mut g, c, p, false).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn cfm_gradient_against_finite_differences() {
    let c = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.5, 0.2, -0.7], vec![-0.4, 0.9, 0.1]]).unwrap();
    let pred = Tensor::from_rows(&[vec![0.1, 0.4, -0.2], vec![0.0, 1.1, 0.5]]).unwrap();
    let count = 2.0;
    let build = |g: &mut Graph<f64>, v: &[_]| {
        let raw = loss_cfm(g, v[0], v[1], false)?;
        g.scale(raw, 1.0 / count)
    };

    let mut params = vec![c.clone(), pred.clone()];
    let report = grad_check(&mut params, &GradCheckConfig::default(), build).unwrap();
    assert!(report.passed, "{report:?}");

    let (_, grads) = analytic_gradients(&[c.clone(), pred.clone()], build).unwrap();
    for i in 0..2 {
        for j in 0..3 {
            let expected = 2.0 * (pred.at(i, j) - c.at(i + 1, j)) / count;
            assert!((grads[1].at(i, j) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn sim_uniform_logits() {
    let mut td = TokenizedDialogue::empty(Speaker::A);
    td.push(Speaker::A, vec![5, 6, 7]);
    let e = encode_tokenized(&td, 16).unwrap();
    let mut g = Graph::<f64>::new();
    let bow = g.constant(Tensor::zeros(&[1, 8]));
    let (l, n) = loss_sim(&mut g, bow, &e).unwrap();
    assert_eq!(n, 3);
    assert!((g.value(l).item() - 3.0 * 8f64.ln()).abs() < 1e-12);
    assert!((g.value(l).item() / n as f64 - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn sim_favourable_logit_drives_loss_to_zero() {
    let mut td = TokenizedDialogue::empty(Speaker::A);
    td.push(Speaker::A, vec![5, 5]);
    let e = encode_tokenized(&td, 16).unwrap();
    let mut g = Graph::<f64>::new();
    let mut row = vec![0.0; 8];
    row[5] = 60.0;
    let bow = g.constant(Tensor::from_rows(&[row]).unwrap());
    let (l, _) = loss_sim(&mut g, bow, &e).unwrap();
    assert!(g.value(l).item() < 1e-20);
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[test]
fn sim_matches_direct_summation() {
    let corpus = template_dialogues(1, 5, 5, 3);
    let vocab = Vocab::build(&corpus, 1, 100).unwrap();
    let (_, config, _) = toy(1, 3);
    let config = ModelConfig {
        vocab_size: vocab.len(),
        dropout: 0.0,
        ..config
    };
    let params = ModelParams::<f64>::init(config.clone(), 4).unwrap();
    let td = tokenize_dialogue(&corpus[0], &vocab);
    let e = encode_tokenized(&td, 64).unwrap();

    let mut g = Graph::new();
    let b = Bound::new(&mut g, &params);
    let out = forward(&mut g, &b, &e, &mut Mode::Eval).unwrap();
    let bow = g.value(out.bow_logits).to_rows();
    let (mut sum, mut n) = (0.0, 0);
    for (k, u) in td.utterances.iter().enumerate() {
        for &t in &u.tokens {
            sum += log_sum_exp(&bow[k]) - bow[k][t as usize];
            n += 1;
        }
    }
    let loss = total_loss(
        &params,
        &batch(&[e], 0),
        &ObjectiveConfig::default(),
        LossNormalization::PerUnit,
    )
    .unwrap();
    assert_eq!(loss.n_sim_tokens, n);
    assert!((loss.l_sim - sum / n as f64).abs() < 1e-6);
}

fn zero_params(config: &ModelConfig) -> ModelParams<f64> {
    let probe = ModelParams::<f64>::init(config.clone(), 0).unwrap();
    let tensors = probe.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    ModelParams::from_tensors(config.clone(), tensors).unwrap()
}

#[test]
fn zero_parameters_give_uniform_terms() {
    let (vocab, config, rows) = toy(3, 8);
    let params = zero_params(&config);
    let ln_v = (vocab.len() as f64).ln();
    let b = batch(&rows, 0);

    let per_unit = total_loss(&params, &b, &ObjectiveConfig::default(), LossNormalization::PerUnit).unwrap();
    assert_eq!(per_unit.l_cfm, 0.0);
    assert!((per_unit.l_sim - ln_v).abs() < 1e-12);
    assert!((per_unit.l_rgm - ln_v).abs() < 1e-12);
    assert!((per_unit.total - 2.0 * ln_v).abs() < 1e-12);

    let raw = total_loss(&params, &b, &ObjectiveConfig::default(), LossNormalization::RawSum).unwrap();
    assert!((raw.l_sim - raw.n_sim_tokens as f64 * ln_v).abs() < 1e-9);
    assert!((raw.l_rgm - raw.n_rgm_tokens as f64 * ln_v).abs() < 1e-9);
}

#[test]
fn disabled_objectives_contribute_nothing() {
    let (_, config, rows) = toy(4, 2);
    let params = ModelParams::<f64>::init(config, 1).unwrap();
    let b = batch(&rows, 0);
    let all = total_loss(&params, &b, &ObjectiveConfig::default(), LossNormalization::PerUnit).unwrap();
    for (cfm, sim, rgm) in [(false, true, true), (true, false, true), (true, true, false)] {
        let obj = ObjectiveConfig {
            cfm,
            sim,
            rgm,
            ..ObjectiveConfig::default()
        };
        let l = total_loss(&params, &b, &obj, LossNormalization::PerUnit).unwrap();
        assert_eq!(l.l_cfm, if cfm { all.l_cfm } else { 0.0 });
        assert_eq!(l.l_sim, if sim { all.l_sim } else { 0.0 });
        assert_eq!(l.l_rgm, if rgm { all.l_rgm } else { 0.0 });
        assert_eq!(l.total, l.l_cfm + l.l_sim + l.l_rgm);
    }
}

#[test]
fn plain_generation_touches_only_the_language_model() {
    let (_, config, rows) = toy(4, 2);
    let config = ModelConfig {
        condition_on_influence: false,
        ..config
    };
    let params = ModelParams::<f64>::init(config, 1).unwrap();
    let obj = ObjectiveConfig {
        cfm: false,
        sim: false,
        ..ObjectiveConfig::default()
    };
    let (loss, grads) = loss_and_grads(&params, &batch(&rows, 0), &obj, LossNormalization::PerUnit, None).unwrap();
    assert_eq!(loss.total, loss.l_rgm);
    for (name, g) in params.layout().names().iter().zip(&grads) {
        let silent = name.starts_with("flow.") || name.starts_with("bow.");
        let zero = g.data().iter().all(|&x| x == 0.0);
        assert_eq!(silent, zero, "{name}");
    }
}

#[test]
fn step_losses_are_additive() {
    let (vocab, config, rows) = toy(6, 5);
    let params = ModelParams::<f32>::init(config, 2).unwrap();
    let mut t = Trainer::new(params, vocab, rows, train_config(12)).unwrap();
    for _ in 0..12 {
        let l = t.step().unwrap();
        assert_eq!(l.total, l.l_cfm + l.l_sim + l.l_rgm);
        assert_eq!(l.lr, t.config().lr_at(l.step));
    }
}

#[test]
fn training_is_deterministic() {
    let (vocab, config, rows) = toy(6, 5);
    let run = || {
        let params = ModelParams::<f32>::init(config.clone(), 2).unwrap();
        let mut t = Trainer::new(params, vocab.clone(), rows.clone(), train_config(6)).unwrap();
        let logs: Vec<_> = (0..6).map(|_| log_bits(&t.step().unwrap())).collect();
        (logs, t.params().tensors().to_vec())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn resume_continues_bit_identically() {
    let (vocab, config, rows) = toy(7, 6);
    let cfg = train_config(20);
    let params = ModelParams::<f32>::init(config, 3).unwrap();

    let mut straight = Trainer::new(params.clone(), vocab.clone(), rows.clone(), cfg.clone()).unwrap();
    let straight_logs: Vec<_> = (0..20).map(|_| straight.step().unwrap()).collect();

    let mut first = Trainer::new(params, vocab, rows.clone(), cfg).unwrap();
    for _ in 0..10 {
        first.step().unwrap();
    }
    let bytes = first.checkpoint().to_bytes().unwrap();
    let restored = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::<f32>::resume(&restored, rows, None).unwrap();
    assert_eq!(resumed.step_count(), 10);
    for expected in &straight_logs[10..] {
        let got = resumed.step().unwrap();
        assert_eq!(got.step, expected.step);
        assert_eq!(log_bits(&got), log_bits(expected));
    }
    assert_eq!(resumed.params().tensors(), straight.params().tensors());
}

#[test]
fn nan_loss_aborts_with_sample_indices() {
    let (vocab, config, rows) = toy(4, 1);
    let mut params = ModelParams::<f32>::init(config, 1).unwrap();
    params.tensor_mut("generator.bias").unwrap().data_mut()[0] = f32::NAN;
    let mut t = Trainer::new(params, vocab, rows, train_config(5)).unwrap();
    let indices = t.batch_indices(1);
    match t.step() {
        Err(Error::Numeric(msg)) => assert!(msg.contains(&format!("{indices:?}")), "{msg}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
    assert_eq!(t.step_count(), 0);
}

#[test]
fn empty_corpus_is_rejected() {
    let (vocab, config, _) = toy(2, 1);
    let params = ModelParams::<f32>::init(config, 1).unwrap();
    assert!(matches!(
        Trainer::new(params, vocab, Vec::new(), train_config(5)),
        Err(Error::Corpus(_))
    ));
}

#[test]
fn vocabulary_must_match_the_model() {
    let (vocab, config, rows) = toy(2, 1);
    let config = ModelConfig {
        vocab_size: vocab.len() + 1,
        ..config
    };
    let params = ModelParams::<f32>::init(config, 1).unwrap();
    assert!(matches!(
        Trainer::new(params, vocab, rows, train_config(5)),
        Err(Error::Config(_))
    ));
}

#[test]
fn contexts_do_not_collapse() {
    let corpus = template_dialogues(12, 4, 8, 21);
    let vocab = Vocab::build(&corpus, 1, 100).unwrap();
    let config = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab.len(),
        max_positions: 64,
        max_utterances: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let rows = encode_corpus(&corpus, &vocab, &config).unwrap();
    let cfg = TrainConfig {
        peak_lr: 1e-2,
        warmup_steps: 10,
        total_steps: 120,
        batch_size: 12,
        seed: 4,
        ..TrainConfig::default()
    };
    let params = ModelParams::<f32>::init(config, 4).unwrap();
    let mut t = Trainer::new(params, vocab, rows.clone(), cfg).unwrap();
    while t.step_count() < 120 {
        t.step().unwrap();
    }
    for e in &rows {
        let mut g = Graph::new();
        let b = Bound::new(&mut g, t.params());
        let out = forward(&mut g, &b, e, &mut Mode::Eval).unwrap();
        let c = g.value(out.contexts).to_rows();
        let n = c.len() as f64;
        let d = c[0].len();
        let var = (0..d)
            .map(|j| {
                let mean = c.iter().map(|r| r[j] as f64).sum::<f64>() / n;
                c.iter().map(|r| (r[j] as f64 - mean).powi(2)).sum::<f64>() / n
            })
            .sum::<f64>()
            / d as f64;
        assert!(var > 1e-3, "context variance {var}");
    }
}

#[test]
fn metric_log_and_checkpoints_are_written() {
    let (vocab, config, rows) = toy(5, 9);
    let cfg = TrainConfig {
        checkpoint_every: 2,
        validate_every: 2,
        ..train_config(4)
    };
    let params = ModelParams::<f32>::init(config, 1).unwrap();
    let mut t = Trainer::new(params, vocab, rows.clone(), cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut log = Vec::new();
    let summary = t.run(&rows, Some(dir.path()), Some(&mut log)).unwrap();
    assert_eq!(summary.last_step, 4);
    assert!(summary.best_validation.is_some());
    let lines: Vec<StepLog> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.iter().map(|l| l.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    for name in ["best.dflw", "last.dflw", "step-2.dflw", "step-4.dflw"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let last = Checkpoint::load(&dir.path().join("last.dflw")).unwrap();
    assert_eq!(last.step, 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_ignores_padding(seed in 0u64..1000, extra in 1usize..24) {
        let (_, config, rows) = toy(3, seed);
        let params = ModelParams::<f64>::init(config, seed).unwrap();
        let tight = total_loss(&params, &batch(&rows, 0), &ObjectiveConfig::default(), LossNormalization::PerUnit).unwrap();
        let width = rows.iter().map(|r| r.len()).max().unwrap() + extra;
        let loose = total_loss(&params, &batch(&rows, width), &ObjectiveConfig::default(), LossNormalization::PerUnit).unwrap();
        prop_assert!((tight.total - loose.total).abs() < 1e-6);
        prop_assert_eq!(tight.n_rgm_tokens, loose.n_rgm_tokens);
    }
}
