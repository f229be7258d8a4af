use super::{BlockLayout, ModelParams};
use crate::data::EncodedDialogue;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Real, Tensor};

#[derive(Debug, Clone)]
struct LayerCache<F> {
    keys: Vec<F>,
    values: Vec<F>,
}

/// Key/value cache for token-by-token decoding.
///
/// Uses the same kernels, in the same accumulation order, as the graph
/// forward pass, so the hidden state after each [`DecoderState::push`] equals
/// the corresponding row of a full recomputation bit for bit.
#[derive(Debug, Clone)]
pub struct DecoderState<F> {
    layers: Vec<LayerCache<F>>,
    len: usize,
    last_hidden: Vec<F>,
}

fn vec_matmul<F: Real>(x: &[F], w: &Tensor<F>, bias: &Tensor<F>) -> Vec<F> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![F::zero(); n];
    kernels::matmul(x, w.data(), 1, k, n, &mut out);
    for (o, &b) in out.iter_mut().zip(bias.data()) {
        *o = *o + b;
    }
    out
}

impl<F: Real> DecoderState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        DecoderState {
            layers: vec![
                LayerCache {
                    keys: Vec::new(),
                    values: Vec::new(),
                };
                params.config().n_layers
            ],
            len: 0,
            last_hidden: Vec::new(),
        }
    }

    /// Feeds every valid token of `prefix`.
    pub fn from_prefix(params: &ModelParams<F>, prefix: &EncodedDialogue) -> Result<Self> {
        let mut state = DecoderState::new(params);
        for i in 0..prefix.valid_len {
            state.push(
                params,
                prefix.token_ids[i],
                prefix.segment_ids[i],
                prefix.position_ids[i],
            )?;
        }
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Final-layer-norm hidden state of the most recent token.
    pub fn last_hidden(&self) -> &[F] {
        &self.last_hidden
    }

    /// Appends one token and returns its hidden state.
    pub fn push(&mut self, params: &ModelParams<F>, token: u32, segment: usize, position: usize) -> Result<&[F]> {
        let c = params.config();
        let lay = params.layout();
        let t = params.tensors();
        let d = c.d_model;
        if token as usize >= c.vocab_size {
            return Err(Error::Lookup {
                index: token as usize,
                len: c.vocab_size,
            });
        }
        if segment >= 2 {
            return Err(Error::Lookup { index: segment, len: 2 });
        }
        if position >= c.max_positions {
            return Err(Error::Lookup {
                index: position,
                len: c.max_positions,
            });
        }
        let tok = t[lay.token_embedding].row(token as usize);
        let seg = t[lay.segment_embedding].row(segment);
        let pos = t[lay.position_embedding].row(position);
        let mut x: Vec<F> = (0..d).map(|i| (tok[i] + seg[i]) + pos[i]).collect();

        let eps = F::lit(c.layer_norm_eps);
        for (bl, cache) in lay.blocks.iter().zip(self.layers.iter_mut()) {
            x = block_step(params, bl, cache, &x, eps);
        }
        let mut h = vec![F::zero(); d];
        kernels::layer_norm_row(
            &x,
            t[lay.final_ln_gain].data(),
            t[lay.final_ln_bias].data(),
            eps,
            &mut h,
        );
        self.len += 1;
        self.last_hidden = h;
        Ok(&self.last_hidden)
    }
}

fn block_step<F: Real>(
    params: &ModelParams<F>,
    bl: &BlockLayout,
    cache: &mut LayerCache<F>,
    x: &[F],
    eps: F,
) -> Vec<F> {
    let c = params.config();
    let t = params.tensors();
    let d = c.d_model;
    let hd = c.head_dim();

    let mut a = vec![F::zero(); d];
    kernels::layer_norm_row(x, t[bl.ln1_gain].data(), t[bl.ln1_bias].data(), eps, &mut a);
    let q = vec_matmul(&a, &t[bl.w_q], &t[bl.b_q]);
    let mut k = vec![F::zero(); d];
    kernels::matmul(&a, t[bl.w_k].data(), 1, d, d, &mut k);
    let v = vec_matmul(&a, &t[bl.w_v], &t[bl.b_v]);
    cache.keys.extend_from_slice(&k);
    cache.values.extend_from_slice(&v);
    let rows = cache.keys.len() / d;

    let scale = F::lit(1.0 / (hd as f64).sqrt());
    let mut attn = vec![F::zero(); d];
    let mut scores = vec![F::zero(); rows];
    let mut weights = vec![F::zero(); rows];
    for h in 0..c.n_heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        for (j, s) in scores.iter_mut().enumerate() {
            *s = kernels::dot(&q[lo..hi], &cache.keys[j * d + lo..j * d + hi]) * scale;
        }
        kernels::softmax_row(&scores, &mut weights);
        for (j, &w) in weights.iter().enumerate() {
            for col in 0..hd {
                attn[lo + col] = attn[lo + col] + w * cache.values[j * d + lo + col];
            }
        }
    }
    let o = vec_matmul(&attn, &t[bl.w_o], &t[bl.b_o]);
    let x: Vec<F> = x.iter().zip(&o).map(|(&a, &b)| a + b).collect();

    let mut m = vec![F::zero(); d];
    kernels::layer_norm_row(&x, t[bl.ln2_gain].data(), t[bl.ln2_bias].data(), eps, &mut m);
    let f: Vec<F> = vec_matmul(&m, &t[bl.w_fc], &t[bl.b_fc])
        .into_iter()
        .map(kernels::gelu)
        .collect();
    let f = vec_matmul(&f, &t[bl.w_proj], &t[bl.b_proj]);
    x.iter().zip(&f).map(|(&a, &b)| a + b).collect()
}
