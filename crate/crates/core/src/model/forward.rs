use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BlockLayout, Layout, ModelConfig, ModelParams};
use crate::data::EncodedDialogue;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Forward-pass mode. Dropout is only active in `Train`.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Parameters bound as leaves of one graph.
pub struct Bound<'p> {
    pub config: &'p ModelConfig,
    pub layout: &'p Layout,
    vars: Vec<Var>,
}

impl<'p> Bound<'p> {
    pub fn new<F: Real>(g: &mut Graph<F>, params: &'p ModelParams<F>) -> Self {
        let vars = params.tensors().iter().map(|t| g.param(t.clone())).collect();
        Bound {
            config: params.config(),
            layout: params.layout(),
            vars,
        }
    }

    /// Binds pre-registered leaves given in layout order.
    pub fn from_vars(config: &'p ModelConfig, layout: &'p Layout, vars: &[Var]) -> Result<Self> {
        if vars.len() != layout.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter variables, got {}",
                layout.len(),
                vars.len()
            )));
        }
        Ok(Bound {
            config,
            layout,
            vars: vars.to_vec(),
        })
    }

    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Hidden states `[L×d]`.
    pub hidden: Var,
    /// Contexts C₁..C_{N+1}, `[(N+1)×d]`.
    pub contexts: Var,
    /// Predicted contexts C′₂..C′_{N+1}, `[N×d]`.
    pub contexts_pred: Var,
    /// I_k = C_{k+1} − C_k, `[N×d]`.
    pub influences: Var,
    /// I′_k = C′_{k+1} − C_k, `[N×d]`.
    pub influences_pred: Var,
    /// Generator logits, one row per entry of `gen_targets`.
    pub gen_logits: Var,
    /// `(target position, utterance index)` per generator row.
    pub gen_targets: Vec<(usize, usize)>,
    /// Bag-of-words logits `[N×|V|]`.
    pub bow_logits: Var,
}

fn dropout<F: Real>(g: &mut Graph<F>, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    let Mode::Train(rng) = mode else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = F::lit(1.0 / (1.0 - p));
    let shape = g.shape(x).to_vec();
    let mut mask = Tensor::zeros(&shape);
    for m in mask.data_mut() {
        if rng.random::<f64>() >= p {
            *m = keep;
        }
    }
    let m = g.constant(mask);
    g.mul(x, m)
}

/// Sum of token, segment and position embeddings.
pub fn embed_inputs<F: Real>(
    g: &mut Graph<F>,
    b: &Bound<'_>,
    encoded: &EncodedDialogue,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    if let Some(&p) = encoded.position_ids.iter().find(|&&p| p >= b.config.max_positions) {
        return Err(Error::Lookup {
            index: p,
            len: b.config.max_positions,
        });
    }
    let ids: Vec<usize> = encoded.token_ids.iter().map(|&t| t as usize).collect();
    let tok = g.embedding(b.var(b.layout.token_embedding), &ids)?;
    let seg = g.embedding(b.var(b.layout.segment_embedding), &encoded.segment_ids)?;
    let pos = g.embedding(b.var(b.layout.position_embedding), &encoded.position_ids)?;
    let x = g.add(tok, seg)?;
    let x = g.add(x, pos)?;
    dropout(g, x, b.config.dropout, mode)
}

/// Additive attention mask: 0 where query `i` may attend key `j`
/// (`j ≤ i` and `j` valid), −∞ elsewhere.
fn causal_mask<F: Real>(len: usize, valid_len: usize) -> Tensor<F> {
    let mut m = Tensor::full(&[len, len], F::neg_infinity());
    let data = m.data_mut();
    for i in 0..len {
        for j in 0..=i.min(valid_len.saturating_sub(1)) {
            data[i * len + j] = F::zero();
        }
    }
    m
}

fn linear<F: Real>(g: &mut Graph<F>, x: Var, w: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, bias)
}

/// One pre-norm block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
fn block<F: Real>(
    g: &mut Graph<F>,
    b: &Bound<'_>,
    bl: &BlockLayout,
    x: Var,
    mask: Var,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let c = b.config;
    let eps = F::lit(c.layer_norm_eps);
    let a = g.layer_norm(x, b.var(bl.ln1_gain), b.var(bl.ln1_bias), eps)?;
    let q = linear(g, a, b.var(bl.w_q), b.var(bl.b_q))?;
    let k = g.matmul(a, b.var(bl.w_k))?;
    let v = linear(g, a, b.var(bl.w_v), b.var(bl.b_v))?;
    let hd = c.head_dim();
    let scale = F::lit(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(c.n_heads);
    for h in 0..c.n_heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let scores = g.add(scores, mask)?;
        let w = g.softmax(scores, 1)?;
        let w = dropout(g, w, c.dropout, mode)?;
        heads.push(g.matmul(w, vh)?);
    }
    let attn = if heads.len() == 1 { heads[0] } else { g.concat(&heads)? };
    let attn = linear(g, attn, b.var(bl.w_o), b.var(bl.b_o))?;
    let x = g.add(x, attn)?;

    let m = g.layer_norm(x, b.var(bl.ln2_gain), b.var(bl.ln2_bias), eps)?;
    let f = linear(g, m, b.var(bl.w_fc), b.var(bl.b_fc))?;
    let f = g.gelu(f)?;
    let f = linear(g, f, b.var(bl.w_proj), b.var(bl.b_proj))?;
    let f = dropout(g, f, c.dropout, mode)?;
    g.add(x, f)
}

/// `n_layers` causal pre-norm blocks followed by the final layer norm.
/// Positions at or beyond `valid_len` are padding and are never attended to.
pub fn transformer_stack<F: Real>(
    g: &mut Graph<F>,
    b: &Bound<'_>,
    x: Var,
    valid_len: usize,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let len = g.shape(x)[0];
    let mask = g.constant(causal_mask(len, valid_len));
    let mut x = x;
    for bl in &b.layout.blocks {
        x = block(g, b, bl, x, mask, mode)?;
    }
    g.layer_norm(
        x,
        b.var(b.layout.final_ln_gain),
        b.var(b.layout.final_ln_bias),
        F::lit(b.config.layer_norm_eps),
    )
}

/// Rows of `hidden` at the `[C]` positions: C₁..C_{N+1}.
pub fn extract_contexts<F: Real>(g: &mut Graph<F>, hidden: Var, positions: &[usize]) -> Result<Var> {
    g.gather_rows(hidden, positions)
}

/// Causal Flow module over `k` context rows; output row `j` is the prediction
/// of the context that follows row `j`.
pub fn flow_predict<F: Real>(g: &mut Graph<F>, b: &Bound<'_>, contexts: Var, mode: &mut Mode<'_>) -> Result<Var> {
    let k = g.shape(contexts)[0];
    if k > b.config.max_utterances {
        return Err(Error::Contract(format!(
            "Flow module received {k} contexts, limit is {}",
            b.config.max_utterances
        )));
    }
    let rows: Vec<usize> = (0..k).collect();
    let pos = g.embedding(b.var(b.layout.flow_position_embedding), &rows)?;
    let mut x = g.add(contexts, pos)?;
    let mask = g.constant(causal_mask(k, k));
    for bl in &b.layout.flow_blocks {
        x = block(g, b, bl, x, mask, mode)?;
    }
    Ok(x)
}

/// `(I, I′)` from contexts `[(N+1)×d]` and predictions `[N×d]`.
pub fn compute_influences<F: Real>(g: &mut Graph<F>, contexts: Var, contexts_pred: Var) -> Result<(Var, Var)> {
    let n = g.shape(contexts_pred)[0];
    if g.shape(contexts)[0] != n + 1 {
        return Err(Error::shape(
            "compute_influences",
            g.shape(contexts),
            g.shape(contexts_pred),
        ));
    }
    let head: Vec<usize> = (0..n).collect();
    let tail: Vec<usize> = (1..=n).collect();
    let prev = g.gather_rows(contexts, &head)?;
    let next = g.gather_rows(contexts, &tail)?;
    let real = g.sub(next, prev)?;
    let pred = g.sub(contexts_pred, prev)?;
    Ok((real, pred))
}

/// `W₁·[I′; h_prev] + b₁` for each row pair.
pub fn generator_logits<F: Real>(g: &mut Graph<F>, b: &Bound<'_>, influence_pred: Var, h_prev: Var) -> Result<Var> {
    let i = if b.config.condition_on_influence {
        influence_pred
    } else {
        let zeros = Tensor::zeros(g.shape(influence_pred));
        g.constant(zeros)
    };
    let x = g.concat(&[i, h_prev])?;
    linear(g, x, b.var(b.layout.generator_weight), b.var(b.layout.generator_bias))
}

/// `W₂·I′ + b₂`.
pub fn bow_logits<F: Real>(g: &mut Graph<F>, b: &Bound<'_>, influence_pred: Var) -> Result<Var> {
    linear(g, influence_pred, b.var(b.layout.bow_weight), b.var(b.layout.bow_bias))
}

pub fn forward<F: Real>(
    g: &mut Graph<F>,
    b: &Bound<'_>,
    encoded: &EncodedDialogue,
    mode: &mut Mode<'_>,
) -> Result<ForwardOutput> {
    let n = encoded.num_utterances();
    if n == 0 || encoded.context_positions.len() != n + 1 {
        return Err(Error::Contract(format!(
            "forward needs N ≥ 1 utterances with N+1 contexts, got N={n}, {} contexts",
            encoded.context_positions.len()
        )));
    }
    let x = embed_inputs(g, b, encoded, mode)?;
    let hidden = transformer_stack(g, b, x, encoded.valid_len, mode)?;
    let contexts = extract_contexts(g, hidden, &encoded.context_positions)?;
    let head: Vec<usize> = (0..n).collect();
    let flow_in = g.gather_rows(contexts, &head)?;
    let contexts_pred = flow_predict(g, b, flow_in, mode)?;
    let (influences, influences_pred) = compute_influences(g, contexts, contexts_pred)?;

    let gen_targets = encoded.generation_targets();
    let utt_rows: Vec<usize> = gen_targets.iter().map(|&(_, k)| k).collect();
    let prev_rows: Vec<usize> = gen_targets.iter().map(|&(p, _)| p - 1).collect();
    let i_rows = g.gather_rows(influences_pred, &utt_rows)?;
    let h_rows = g.gather_rows(hidden, &prev_rows)?;
    let gen_logits = generator_logits(g, b, i_rows, h_rows)?;
    let bow = bow_logits(g, b, influences_pred)?;

    Ok(ForwardOutput {
        hidden,
        contexts,
        contexts_pred,
        influences,
        influences_pred,
        gen_logits,
        gen_targets,
        bow_logits: bow,
    })
}

/// Prediction for the utterance following a `[C]`-terminated prefix.
#[derive(Debug, Clone)]
pub struct NextPrediction<F> {
    /// C₁..C_k of the prefix.
    pub contexts: Tensor<F>,
    /// C′_{k+1}.
    pub context_pred: Vec<F>,
    /// I′_k = C′_{k+1} − C_k.
    pub influence_pred: Vec<F>,
}

/// Runs the encoder and Flow module on a prefix with `k − 1` complete
/// utterances (eval mode).
pub fn predict_next<F: Real>(params: &ModelParams<F>, prefix: &EncodedDialogue) -> Result<NextPrediction<F>> {
    if !prefix.ends_with_context() {
        return Err(Error::Contract("prefix must end with a [C] token".into()));
    }
    let mut g = Graph::new();
    let b = Bound::new(&mut g, params);
    let mut mode = Mode::Eval;
    let x = embed_inputs(&mut g, &b, prefix, &mut mode)?;
    let hidden = transformer_stack(&mut g, &b, x, prefix.valid_len, &mut mode)?;
    let contexts = extract_contexts(&mut g, hidden, &prefix.context_positions)?;
    let pred = flow_predict(&mut g, &b, contexts, &mut mode)?;
    let c = g.value(contexts).clone();
    let k = c.rows();
    let context_pred = g.value(pred).row(k - 1).to_vec();
    let influence_pred = context_pred.iter().zip(c.row(k - 1)).map(|(&p, &ck)| p - ck).collect();
    Ok(NextPrediction {
        contexts: c,
        context_pred,
        influence_pred,
    })
}
