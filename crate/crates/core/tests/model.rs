use dialoflow_core::data::{encode_tokenized, EncodedDialogue, Speaker, TokenizedDialogue, NUM_RESERVED};
use dialoflow_core::model::{
    forward, predict_next, Bound, DecoderState, ForwardOutput, Mode, ModelConfig, ModelParams,
};
use dialoflow_core::tensor::{analytic_gradients, grad_check, GradCheckConfig};
use dialoflow_core::training::{sample_loss, LossNormalization, ObjectiveConfig, TermCounts};
use dialoflow_core::{Graph, Real, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(d: usize, layers: usize, heads: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_layers: layers,
        n_heads: heads,
        d_ff: 2 * d,
        vocab_size: vocab,
        max_positions: 64,
        max_utterances: 8,
        flow_layers: 1,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn dialogue(lens: &[usize], vocab: usize, seed: u64) -> EncodedDialogue {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut td = TokenizedDialogue::empty(Speaker::A);
    let mut speaker = Speaker::A;
    for &n in lens {
        let toks = (0..n)
            .map(|_| rng.random_range(NUM_RESERVED as u32..vocab as u32))
            .collect();
        td.push(speaker, toks);
        speaker = speaker.other();
    }
    encode_tokenized(&td, 64).unwrap()
}

fn run<F: Real>(params: &ModelParams<F>, e: &EncodedDialogue) -> (Graph<F>, ForwardOutput) {
    let mut g = Graph::new();
    let b = Bound::new(&mut g, params);
    let out = forward(&mut g, &b, e, &mut Mode::Eval).unwrap();
    (g, out)
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn shape_audit() {
    let params = ModelParams::<f32>::init(config(16, 2, 4, 50), 1).unwrap();
    let e = dialogue(&[5, 5, 6], 50, 2);
    assert_eq!(e.len(), 20);
    let (g, out) = run(&params, &e);
    assert_eq!(g.shape(out.hidden), &[20, 16]);
    assert_eq!(g.shape(out.contexts), &[4, 16]);
    assert_eq!(g.shape(out.contexts_pred), &[3, 16]);
    assert_eq!(g.shape(out.influences), &[3, 16]);
    assert_eq!(g.shape(out.influences_pred), &[3, 16]);
    assert_eq!(g.shape(out.bow_logits), &[3, 50]);
    assert_eq!(g.shape(out.gen_logits), &[19, 50]);
    assert_eq!(out.gen_targets.len(), 19);
}

#[test]
fn token_level_causality() {
    let params = ModelParams::<f32>::init(config(16, 2, 4, 40), 3).unwrap();
    let e = dialogue(&[4, 3, 5], 40, 4);
    let (g0, base) = run(&params, &e);
    let h0 = g0.value(base.hidden).clone();
    for p in [2usize, 7, 12] {
        let mut e2 = e.clone();
        e2.token_ids[p] = if e2.token_ids[p] == 5 { 6 } else { 5 };
        let (g1, out) = run(&params, &e2);
        let h1 = g1.value(out.hidden);
        for i in 0..e.len() {
            let same = h0.row(i).iter().zip(h1.row(i)).all(|(a, b)| a.to_bits() == b.to_bits());
            if i < p {
                assert!(same, "row {i} changed after perturbing position {p}");
            } else if i == p {
                assert!(!same, "row {p} did not react to its own token");
            }
        }
    }
}

#[test]
fn utterance_level_causality() {
    let params = ModelParams::<f32>::init(config(16, 2, 4, 40), 5).unwrap();
    let e = dialogue(&[3, 4, 3, 2], 40, 6);
    let (g0, base) = run(&params, &e);
    // Perturb the first token of utterance j (0-based utterance index 2).
    let j = 2;
    let p = e.utterance_spans[j].start;
    let mut e2 = e.clone();
    e2.token_ids[p] = if e2.token_ids[p] == 7 { 8 } else { 7 };
    let (g1, out) = run(&params, &e2);
    let (c0, c1) = (g0.value(base.contexts), g1.value(out.contexts));
    let (p0, p1) = (g0.value(base.contexts_pred), g1.value(out.contexts_pred));
    let (i0, i1) = (g0.value(base.influences_pred), g1.value(out.influences_pred));
    for k in 0..=j {
        assert_eq!(c0.row(k), c1.row(k), "context {k}");
        assert_eq!(p0.row(k), p1.row(k), "predicted context {k}");
        assert_eq!(i0.row(k), i1.row(k), "predicted influence {k}");
    }
    assert_ne!(c0.row(j + 1), c1.row(j + 1));
}

#[test]
fn influences_are_exact_differences() {
    let params = ModelParams::<f32>::init(config(16, 2, 4, 40), 7).unwrap();
    let e = dialogue(&[3, 5, 2], 40, 8);
    let (g, out) = run(&params, &e);
    let c = g.value(out.contexts);
    let cp = g.value(out.contexts_pred);
    let i = g.value(out.influences);
    let ip = g.value(out.influences_pred);
    for k in 0..3 {
        for t in 0..16 {
            assert_eq!(i.at(k, t).to_bits(), (c.at(k + 1, t) - c.at(k, t)).to_bits());
            assert_eq!(ip.at(k, t).to_bits(), (cp.at(k, t) - c.at(k, t)).to_bits());
        }
    }
}

#[test]
fn eval_mode_is_deterministic_and_dropout_is_seeded() {
    let cfg = ModelConfig {
        dropout: 0.3,
        ..config(16, 2, 4, 40)
    };
    let params = ModelParams::<f32>::init(cfg, 9).unwrap();
    let e = dialogue(&[3, 3], 40, 10);
    let (ga, a) = run(&params, &e);
    let (gb, b) = run(&params, &e);
    assert_eq!(bits(ga.value(a.gen_logits)), bits(gb.value(b.gen_logits)));

    let train = |seed: u64| {
        let mut g = Graph::new();
        let bd = Bound::new(&mut g, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = forward(&mut g, &bd, &e, &mut Mode::Train(&mut rng)).unwrap();
        bits(g.value(out.gen_logits))
    };
    assert_eq!(train(1), train(1));
    assert_ne!(train(1), train(2));
    assert_ne!(train(1), bits(ga.value(a.gen_logits)));
}

#[test]
fn zero_residual_branches_leave_normalized_embeddings() {
    let mut params = ModelParams::<f64>::init(config(8, 2, 2, 20), 11).unwrap();
    let names: Vec<String> = params.layout().names().to_vec();
    for n in names.iter().filter(|n| {
        n.starts_with("block")
            && (n.ends_with("w_o") || n.ends_with("b_o") || n.ends_with("w_proj") || n.ends_with("b_proj"))
    }) {
        let t = params.tensor_mut(n).unwrap();
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let e = dialogue(&[2, 3], 20, 12);
    let (g, out) = run(&params, &e);
    let h = g.value(out.hidden);
    let tok = params.tensor("embed.token").unwrap();
    let seg = params.tensor("embed.segment").unwrap();
    let pos = params.tensor("embed.position").unwrap();
    let gain = params.tensor("final_ln.gain").unwrap();
    let bias = params.tensor("final_ln.bias").unwrap();
    for i in 0..e.len() {
        let x: Vec<f64> = (0..8)
            .map(|c| tok.at(e.token_ids[i] as usize, c) + seg.at(e.segment_ids[i], c) + pos.at(e.position_ids[i], c))
            .collect();
        let mean = x.iter().sum::<f64>() / 8.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        for (c, xc) in x.iter().enumerate() {
            let want = (xc - mean) / (var + 1e-5).sqrt() * gain.data()[c] + bias.data()[c];
            assert!((h.at(i, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn generator_and_bow_match_matrix_oracle() {
    let params = ModelParams::<f64>::init(config(8, 1, 2, 24), 13).unwrap();
    let e = dialogue(&[3, 2], 24, 14);
    let (g, out) = run(&params, &e);
    let ip = g.value(out.influences_pred);
    let h = g.value(out.hidden);
    let w1 = params.tensor("generator.weight").unwrap();
    let b1 = params.tensor("generator.bias").unwrap();
    let w2 = params.tensor("bow.weight").unwrap();
    let b2 = params.tensor("bow.bias").unwrap();
    let logits = g.value(out.gen_logits);
    for (row, &(p, k)) in out.gen_targets.iter().enumerate() {
        let input: Vec<f64> = ip.row(k).iter().chain(h.row(p - 1)).copied().collect();
        for v in 0..24 {
            let want: f64 = input.iter().enumerate().map(|(r, x)| x * w1.at(r, v)).sum::<f64>() + b1.data()[v];
            assert!((logits.at(row, v) - want).abs() < 1e-12);
        }
    }
    let bow = g.value(out.bow_logits);
    for k in 0..2 {
        for v in 0..24 {
            let want: f64 = ip.row(k).iter().enumerate().map(|(r, x)| x * w2.at(r, v)).sum::<f64>() + b2.data()[v];
            assert!((bow.at(k, v) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn unconditioned_generator_ignores_influence() {
    let cfg = ModelConfig {
        condition_on_influence: false,
        ..config(8, 1, 2, 24)
    };
    let mut params = ModelParams::<f64>::init(cfg, 15).unwrap();
    let e = dialogue(&[3, 2], 24, 16);
    let (g0, a) = run(&params, &e);
    let before = g0.value(a.gen_logits).clone();
    // Changing the Flow module changes I′ but must not affect the generator.
    for x in params.tensor_mut("flow.block0.ffn.w_fc").unwrap().data_mut() {
        *x *= 3.0;
    }
    let (g1, b) = run(&params, &e);
    assert_eq!(&before, g1.value(b.gen_logits));
    assert_ne!(g0.value(a.influences_pred), g1.value(b.influences_pred));
}

fn total_loss_fn<'a>(
    params: &'a ModelParams<f64>,
    rows: &'a [EncodedDialogue],
    objectives: ObjectiveConfig,
) -> impl FnMut(&mut Graph<f64>, &[dialoflow_core::Var]) -> dialoflow_core::Result<dialoflow_core::Var> + 'a {
    let counts = TermCounts::of(rows);
    move |g, vars| {
        let b = Bound::from_vars(params.config(), params.layout(), vars)?;
        let mut total = None;
        for e in rows {
            let (l, _) = sample_loss(
                g,
                &b,
                e,
                &objectives,
                &counts,
                LossNormalization::PerUnit,
                &mut Mode::Eval,
            )?;
            total = Some(match total {
                None => l.total,
                Some(t) => g.add(t, l.total)?,
            });
        }
        Ok(total.unwrap())
    }
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let params = ModelParams::<f64>::init(config(8, 2, 2, 12), 17).unwrap();
    let rows = vec![dialogue(&[2, 3, 1], 12, 18), dialogue(&[1, 2], 12, 19)];
    let mut tensors = params.tensors().to_vec();
    let report = grad_check(
        &mut tensors,
        &GradCheckConfig::default(),
        total_loss_fn(&params, &rows, ObjectiveConfig::default()),
    )
    .unwrap();
    let worst = report.worst().unwrap();
    assert!(
        report.passed,
        "{}: rel {:.3e}",
        params.layout().names()[worst.index],
        worst.max_rel_error
    );
}

#[test]
fn detached_context_target_gradients_match_finite_differences_of_surrogate() {
    // With the target detached, the gradient of the context loss alone must
    // still agree with finite differences of the Flow-side parameters.
    let params = ModelParams::<f64>::init(config(8, 1, 2, 12), 21).unwrap();
    let rows = vec![dialogue(&[2, 2, 2], 12, 22)];
    let objectives = ObjectiveConfig {
        sim: false,
        rgm: false,
        ..ObjectiveConfig::default()
    };
    let (_, attached) = analytic_gradients(params.tensors(), &mut total_loss_fn(&params, &rows, objectives)).unwrap();
    let detached_obj = ObjectiveConfig {
        detach_cfm_target: true,
        ..objectives
    };
    let (_, detached) = analytic_gradients(params.tensors(), &mut total_loss_fn(&params, &rows, detached_obj)).unwrap();
    let flow_w = params.layout().index_of("flow.block0.ffn.w_fc").unwrap();
    let tok = params.layout().index_of("embed.token").unwrap();
    assert_ne!(attached[tok], detached[tok]);
    for (a, d) in attached[flow_w].data().iter().zip(detached[flow_w].data()) {
        assert!((a - d).abs() < 1e-14);
    }
}

#[test]
fn single_precision_gradients_track_double_precision() {
    let p64 = ModelParams::<f64>::init(config(8, 2, 2, 12), 23).unwrap();
    let p32: ModelParams<f32> = p64.cast();
    let rows = vec![dialogue(&[3, 2, 2], 12, 24)];
    let (_, g64) = analytic_gradients(
        p64.tensors(),
        &mut total_loss_fn(&p64, &rows, ObjectiveConfig::default()),
    )
    .unwrap();
    let counts = TermCounts::of(&rows);
    let (_, g32) = analytic_gradients(
        p32.tensors(),
        &mut |g: &mut Graph<f32>, vars: &[dialoflow_core::Var]| {
            let b = Bound::from_vars(p32.config(), p32.layout(), vars)?;
            let (l, _) = sample_loss(
                g,
                &b,
                &rows[0],
                &ObjectiveConfig::default(),
                &counts,
                LossNormalization::PerUnit,
                &mut Mode::Eval,
            )?;
            Ok(l.total)
        },
    )
    .unwrap();
    let global = g64.iter().flat_map(|t| t.data()).fold(0.0f64, |m, x| m.max(x.abs()));
    for (i, (a, b)) in g32.iter().zip(&g64).enumerate() {
        let scale = b.data().iter().fold(1e-4 * global, |m, x| m.max(x.abs()));
        let err = a
            .data()
            .iter()
            .zip(b.data())
            .fold(0.0f64, |m, (x, y)| m.max((*x as f64 - y).abs()));
        assert!(err / scale < 1e-3, "{}: {:.3e}", p64.layout().names()[i], err / scale);
    }
}

#[test]
fn flow_module_gradients_match_finite_differences() {
    let params = ModelParams::<f64>::init(config(8, 1, 2, 12), 25).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let contexts = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
    let mut tensors = params.tensors().to_vec();
    tensors.push(contexts);
    let n = params.layout().len();
    let report = grad_check(&mut tensors, &GradCheckConfig::default(), |g, vars| {
        let b = Bound::from_vars(params.config(), params.layout(), &vars[..n])?;
        let pred = dialoflow_core::model::flow_predict(g, &b, vars[n], &mut Mode::Eval)?;
        let sq = g.sum_squares(pred)?;
        let lin = g.sum(pred)?;
        g.add(sq, lin)
    })
    .unwrap();
    assert!(report.passed, "max rel {:.3e}", report.max_rel_error);
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = ModelConfig {
        vocab_size: 12,
        max_positions: 16,
        max_utterances: 3,
        ..config(8, 2, 2, 12)
    };
    let params = ModelParams::<f64>::init(cfg, 27).unwrap();
    let rows = vec![dialogue(&[3, 4, 5], 12, 28)];
    let (_, grads) = analytic_gradients(
        params.tensors(),
        &mut total_loss_fn(&params, &rows, ObjectiveConfig::default()),
    )
    .unwrap();
    let global = grads.iter().flat_map(|t| t.data()).fold(0.0f64, |m, x| m.max(x.abs()));
    for (name, g) in params.layout().names().iter().zip(&grads) {
        let largest = g.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(largest > 1e-8 * global, "{name} has a vanishing gradient");
    }
}

#[test]
fn next_prediction_matches_full_forward() {
    let params = ModelParams::<f32>::init(config(16, 2, 4, 30), 29).unwrap();
    let full = dialogue(&[3, 2, 4], 30, 30);
    let (g, out) = run(&params, &full);
    let mut td = TokenizedDialogue::empty(Speaker::A);
    for k in 0..2 {
        td.push(full.speakers[k], full.content_tokens(k).to_vec());
    }
    let prefix = encode_tokenized(&td, 64).unwrap();
    let next = predict_next(&params, &prefix).unwrap();
    assert_eq!(next.context_pred, g.value(out.contexts_pred).row(2));
    assert_eq!(next.influence_pred, g.value(out.influences_pred).row(2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn incremental_decoding_equals_full_recompute(
        lens in prop::collection::vec(0usize..5, 1..5),
        seed in any::<u64>(),
    ) {
        let params = ModelParams::<f32>::init(config(16, 2, 4, 30), seed % 7).unwrap();
        let e = dialogue(&lens, 30, seed);
        let (g, out) = run(&params, &e);
        let h = g.value(out.hidden);
        let mut state = DecoderState::new(&params);
        for i in 0..e.len() {
            let row = state.push(&params, e.token_ids[i], e.segment_ids[i], e.position_ids[i]).unwrap();
            prop_assert_eq!(row, h.row(i));
        }
    }

    #[test]
    fn padding_does_not_change_valid_rows(lens in prop::collection::vec(1usize..4, 1..4), extra in 1usize..6, seed in any::<u64>()) {
        let params = ModelParams::<f32>::init(config(8, 1, 2, 20), 3).unwrap();
        let e = dialogue(&lens, 20, seed);
        let padded = dialoflow_core::data::Batch::pad(std::slice::from_ref(&e), e.len() + extra, 0).rows.remove(0);
        let (g0, a) = run(&params, &e);
        let (g1, b) = run(&params, &padded);
        let (h0, h1) = (g0.value(a.hidden), g1.value(b.hidden));
        for i in 0..e.len() {
            prop_assert_eq!(h0.row(i), h1.row(i));
        }
        prop_assert_eq!(g0.value(a.gen_logits), g1.value(b.gen_logits));
    }
}
