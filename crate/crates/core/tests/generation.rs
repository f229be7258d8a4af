use dialoflow_core::data::{
    encode_tokenized, Speaker, TokenizedDialogue, Vocab, CTX_ID, NUM_RESERVED, PAD_ID, SPEAKER1_ID, SPEAKER2_ID,
};
use dialoflow_core::generation::{
    beam_decode, beam_search, greedy_decode, predict_next_influence, rank_score, respond, ChatSession, DecodeConfig,
    Hypothesis, StepScorer,
};
use dialoflow_core::model::{ModelConfig, ModelParams};
use dialoflow_core::synthetic::template_dialogues;
use dialoflow_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Next-token distribution that depends only on the previous token.
struct Bigram {
    rows: Vec<Vec<f64>>,
}

impl Bigram {
    fn from_probs(p: &[[f64; 5]; 6]) -> Self {
        Bigram {
            rows: p.iter().map(|r| r.iter().map(|x| x.ln()).collect()).collect(),
        }
    }

    fn row(&self, last: Option<u32>) -> &[f64] {
        &self.rows[last.map_or(0, |t| t as usize + 1)]
    }
}

impl StepScorer for Bigram {
    type State = Option<u32>;

    fn vocab_size(&self) -> usize {
        5
    }

    fn log_probs(&self, s: &Option<u32>) -> Result<Vec<f64>> {
        Ok(self.row(*s).to_vec())
    }

    fn advance(&self, _: &Option<u32>, t: u32) -> Result<Option<u32>> {
        Ok(Some(t))
    }
}

/// Every sequence up to `depth` tokens that ends in `[C]` or has length
/// `depth`, with its log-probability.
fn enumerate(head: &Bigram, depth: usize) -> Vec<(Vec<u32>, f64, bool)> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::<u32>::new(), 0.0)];
    while let Some((seq, lp)) = stack.pop() {
        for t in 0..5u32 {
            let mut s = seq.clone();
            s.push(t);
            let l = lp + head.row(seq.last().copied())[t as usize];
            if t == CTX_ID {
                out.push((s, l, true));
            } else if s.len() == depth {
                out.push((s, l, false));
            } else {
                stack.push((s, l));
            }
        }
    }
    out
}

fn ranked(mut all: Vec<(Vec<u32>, f64, bool)>, alpha: f64) -> Vec<(Vec<u32>, f64)> {
    let score = |s: &[u32], lp: f64| lp / (s.len() as f64).powf(alpha);
    all.sort_by(|a, b| {
        score(&b.0, b.1)
            .total_cmp(&score(&a.0, a.1))
            .then_with(|| a.0.cmp(&b.0))
    });
    all.into_iter().map(|(s, l, _)| (s, l)).collect()
}

#[test]
fn beam_two_finds_the_two_best_terminated_sequences() {
    // ids: 0 = a, 1 = b, 2 = [C], 3 = c, 4 = d
    let head = Bigram::from_probs(&[
        [0.30, 0.20, 0.05, 0.30, 0.15],
        [0.10, 0.10, 0.20, 0.50, 0.10],
        [0.20, 0.10, 0.10, 0.40, 0.20],
        [0.20, 0.20, 0.20, 0.20, 0.20],
        [0.05, 0.05, 0.70, 0.10, 0.10],
        [0.25, 0.25, 0.30, 0.10, 0.10],
    ]);
    let terminated: Vec<_> = enumerate(&head, 4).into_iter().filter(|(_, _, t)| *t).collect();
    let best = ranked(terminated, 0.0);

    let beam = beam_search(&head, None, 2, 4, 0.0).unwrap();
    assert_eq!(beam.len(), 2);
    for (h, (seq, lp)) in beam.iter().zip(&best) {
        assert_eq!(&h.tokens, seq);
        assert!((h.log_prob - lp).abs() < 1e-12);
        assert!(h.terminated());
    }
}

#[test]
fn beam_two_beats_greedy_on_a_trap() {
    let head = Bigram::from_probs(&[
        [0.01, 0.01, 0.01, 0.55, 0.42],
        [0.25, 0.25, 0.25, 0.25, 0.00001],
        [0.25, 0.25, 0.25, 0.25, 0.00001],
        [0.25, 0.25, 0.25, 0.25, 0.00001],
        [0.30, 0.30, 0.05, 0.30, 0.05],
        [0.01, 0.01, 0.96, 0.01, 0.01],
    ]);
    let greedy = dialoflow_core::generation::greedy_search(&head, None, 4).unwrap();
    assert_eq!(greedy.tokens[0], 3);
    let beam = beam_search(&head, None, 2, 4, 0.0).unwrap();
    assert_eq!(beam[0].tokens, vec![4, CTX_ID]);
    assert!(beam[0].log_prob > greedy.log_prob);
}

fn random_head(seed: u64) -> Bigram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = [[0.0; 5]; 6];
    for row in p.iter_mut() {
        let raw: Vec<f64> = (0..5).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for (x, r) in row.iter_mut().zip(&raw) {
            *x = r / s;
        }
    }
    Bigram::from_probs(&p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exhaustive_width_equals_brute_force(seed in 0u64..10_000, alpha in prop::sample::select(vec![0.0, 0.7, 1.0])) {
        let head = random_head(seed);
        let all = enumerate(&head, 4);
        let expected = ranked(all.clone(), alpha);
        let beam = beam_search(&head, None, 5usize.pow(4), 4, alpha).unwrap();
        prop_assert_eq!(beam.len(), all.len());
        for (h, (seq, lp)) in beam.iter().zip(&expected) {
            prop_assert_eq!(&h.tokens, seq);
            prop_assert!((h.log_prob - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_zero_ranks_by_log_prob(seed in 0u64..10_000, width in 1usize..6) {
        let head = random_head(seed);
        let beam = beam_search(&head, None, width, 4, 0.0).unwrap();
        for w in beam.windows(2) {
            prop_assert!(w[0].log_prob >= w[1].log_prob);
            prop_assert_eq!(rank_score(&w[0], 0.0), w[0].log_prob);
        }
    }
}

fn model(vocab: usize, seed: u64) -> ModelParams<f64> {
    let config = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab,
        max_positions: 48,
        max_utterances: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    ModelParams::init(config, seed).unwrap()
}

fn random_history(rng: &mut ChaCha8Rng, vocab: usize) -> TokenizedDialogue {
    let mut td = TokenizedDialogue::empty(Speaker::A);
    let mut speaker = Speaker::A;
    for _ in 0..rng.random_range(0..4) {
        let n = rng.random_range(1..6);
        td.push(
            speaker,
            (0..n)
                .map(|_| rng.random_range(NUM_RESERVED as u32..vocab as u32))
                .collect(),
        );
        speaker = speaker.other();
    }
    td
}

#[test]
fn width_one_beam_is_greedy() {
    let params = model(24, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let history = random_history(&mut rng, 24);
        let g = greedy_decode(&params, &history, 10).unwrap();
        let b = beam_decode(&params, &history, 1, 10, 0.7).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].tokens, g.tokens);
        assert_eq!(b[0].log_prob.to_bits(), g.log_prob.to_bits());
    }
}

fn well_formed(h: &Hypothesis) -> bool {
    let forbidden = [PAD_ID, SPEAKER1_ID, SPEAKER2_ID];
    let body = h.content();
    !h.tokens.iter().any(|t| forbidden.contains(t)) && !body.contains(&CTX_ID)
}

#[test]
fn decoded_utterances_are_well_formed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..6 {
        let params = model(12, seed);
        let history = random_history(&mut rng, 12);
        let g = greedy_decode(&params, &history, 12).unwrap();
        assert!(well_formed(&g), "{:?}", g.tokens);
        for h in beam_decode(&params, &history, 4, 12, 0.7).unwrap() {
            assert!(well_formed(&h), "{:?}", h.tokens);
            assert!(h.tokens.len() <= 12);
        }
    }
}

#[test]
fn hypothesis_log_prob_never_increases() {
    let params = model(16, 2);
    let history = random_history(&mut ChaCha8Rng::seed_from_u64(1), 16);
    let h = greedy_decode(&params, &history, 8).unwrap();
    for n in 1..h.tokens.len() {
        let shorter = greedy_decode(&params, &history, n).unwrap();
        assert!(shorter.log_prob >= h.log_prob);
    }
}

#[test]
fn influence_prediction_is_deterministic_and_history_sensitive() {
    let params = model(20, 4);
    let mut td = TokenizedDialogue::empty(Speaker::A);
    let empty = encode_tokenized(&td, 48).unwrap();
    let first = predict_next_influence(&params, &empty).unwrap();
    assert_eq!(first.len(), 16);

    td.push(Speaker::A, vec![7, 8, 9]);
    let a = predict_next_influence(&params, &encode_tokenized(&td, 48).unwrap()).unwrap();
    let again = predict_next_influence(&params, &encode_tokenized(&td, 48).unwrap()).unwrap();
    assert_eq!(a, again);

    let mut other = TokenizedDialogue::empty(Speaker::A);
    other.push(Speaker::A, vec![7, 8, 10]);
    let b = predict_next_influence(&params, &encode_tokenized(&other, 48).unwrap()).unwrap();
    assert_ne!(a, b);
}

#[test]
fn unterminated_prefix_is_rejected() {
    let params = model(20, 4);
    let mut td = TokenizedDialogue::empty(Speaker::A);
    td.push(Speaker::A, vec![7, 8]);
    let mut e = encode_tokenized(&td, 48).unwrap();
    e.token_ids.pop();
    e.segment_ids.pop();
    e.position_ids.pop();
    e.loss_mask.pop();
    e.valid_len -= 1;
    assert!(predict_next_influence(&params, &e).is_err());
}

#[test]
fn long_histories_are_truncated_not_rejected() {
    let params = model(16, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut td = TokenizedDialogue::empty(Speaker::A);
    let mut speaker = Speaker::A;
    for _ in 0..12 {
        td.push(speaker, (0..6).map(|_| rng.random_range(5..16)).collect());
        speaker = speaker.other();
    }
    let r = respond(&params, &td, &DecodeConfig::greedy()).unwrap();
    assert!(r.dropped_utterances > 0);
    assert!(!r.best().tokens.is_empty());
}

fn chat_fixture() -> (ModelParams<f32>, Vocab) {
    let corpus = template_dialogues(10, 3, 6, 2);
    let vocab = Vocab::build(&corpus, 1, 100).unwrap();
    let params = model(vocab.len(), 8).cast();
    (params, vocab)
}

#[test]
fn chat_contexts_grow_by_two_per_exchange() {
    let (params, vocab) = chat_fixture();
    let mut s = ChatSession::new(DecodeConfig {
        max_new_tokens: 6,
        ..DecodeConfig::greedy()
    })
    .unwrap();
    assert_eq!(s.contexts(&params).unwrap().0.len(), 1);
    for (i, msg) in ["tea ?", "why tea ?"].iter().enumerate() {
        let turn = s.step(&params, &vocab, msg).unwrap();
        assert!((-1.0..=1.0).contains(&turn.s_k));
        assert!(turn.flow_running >= 1.0);
        assert_eq!(turn.turn_index, 2 * i + 1);
        assert_eq!(s.contexts(&params).unwrap().0.len(), 1 + 2 * (i + 1));
    }
    assert_eq!(s.similarities().len(), 2);
    assert_eq!(s.to_log().bot_turns(), 2);
}

#[test]
fn chat_replay_is_deterministic() {
    let (params, vocab) = chat_fixture();
    let msgs = ["tea ?", "yes , tea .", "more jazz .", "love chess ."];
    let (_, a) = ChatSession::replay(&params, &vocab, DecodeConfig::beam(3), &msgs).unwrap();
    let (_, b) = ChatSession::replay(&params, &vocab, DecodeConfig::beam(3), &msgs).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_chat_message_is_rejected() {
    let (params, vocab) = chat_fixture();
    let mut s = ChatSession::new(DecodeConfig::greedy()).unwrap();
    assert!(s.step(&params, &vocab, "   ").is_err());
    assert!(s.turns().is_empty());
}
