//! The context-flow dialogue network.
//!
//! Parameters are stored as one flat list of named tensors (see [`Layout`]);
//! the forward pass binds them to a [`Graph`](crate::tensor::Graph) and reads
//! them back by layout index. This keeps checkpointing, optimization and
//! gradient checking oblivious to the architecture.

mod forward;
mod incremental;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{encode_tokenized, EncodedDialogue, TokenizedDialogue};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Real, Tensor};

pub use forward::{
    bow_logits, compute_influences, embed_inputs, extract_contexts, flow_predict, forward, generator_logits,
    predict_next, transformer_stack, Bound, ForwardOutput, Mode, NextPrediction,
};
pub use incremental::DecoderState;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Rows of the Flow module's utterance-index embedding.
    pub max_utterances: usize,
    pub flow_layers: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub precision: Precision,
    /// Feed the predicted influence into the response generator. Disabling it
    /// gives an influence-free baseline generator.
    pub condition_on_influence: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            vocab_size: 64,
            max_positions: 128,
            max_utterances: 32,
            flow_layers: 1,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            precision: Precision::F32,
            condition_on_influence: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.flow_layers == 0 {
            return fail("flow_layers must be at least 1".into());
        }
        if self.vocab_size < 6 {
            return fail(format!("vocab_size {} below minimum 6", self.vocab_size));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_positions == 0 || self.max_utterances == 0 {
            return fail("layer count, d_ff, max_positions and max_utterances must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.layer_norm_eps <= 0.0 {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Indices of one transformer block's tensors within the flat parameter list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub w_q: usize,
    pub b_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub b_v: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Names, shapes and roles of every parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
    pub token_embedding: usize,
    pub segment_embedding: usize,
    pub position_embedding: usize,
    pub blocks: Vec<BlockLayout>,
    pub final_ln_gain: usize,
    pub final_ln_bias: usize,
    pub flow_position_embedding: usize,
    pub flow_blocks: Vec<BlockLayout>,
    pub generator_weight: usize,
    pub generator_bias: usize,
    pub bow_weight: usize,
    pub bow_bias: usize,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn block(&mut self, prefix: &str, d: usize, ff: usize) -> BlockLayout {
        use Init::*;
        let mut a = |n: &str, s: Vec<usize>, i| self.add(format!("{prefix}.{n}"), s, i);
        BlockLayout {
            ln1_gain: a("ln1.gain", vec![d], Ones),
            ln1_bias: a("ln1.bias", vec![d], Zeros),
            w_q: a("attn.w_q", vec![d, d], Normal),
            b_q: a("attn.b_q", vec![d], Zeros),
            w_k: a("attn.w_k", vec![d, d], Normal),
            w_v: a("attn.w_v", vec![d, d], Normal),
            b_v: a("attn.b_v", vec![d], Zeros),
            w_o: a("attn.w_o", vec![d, d], Normal),
            b_o: a("attn.b_o", vec![d], Zeros),
            ln2_gain: a("ln2.gain", vec![d], Ones),
            ln2_bias: a("ln2.bias", vec![d], Zeros),
            w_fc: a("ffn.w_fc", vec![d, ff], Normal),
            b_fc: a("ffn.b_fc", vec![ff], Zeros),
            w_proj: a("ffn.w_proj", vec![ff, d], Normal),
            b_proj: a("ffn.b_proj", vec![d], Zeros),
        }
    }
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        use Init::*;
        let (d, v) = (c.d_model, c.vocab_size);
        let mut b = LayoutBuilder {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
        };
        let token_embedding = b.add("embed.token".into(), vec![v, d], Normal);
        let segment_embedding = b.add("embed.segment".into(), vec![2, d], Normal);
        let position_embedding = b.add("embed.position".into(), vec![c.max_positions, d], Normal);
        let blocks = (0..c.n_layers)
            .map(|i| b.block(&format!("block{i}"), d, c.d_ff))
            .collect();
        let final_ln_gain = b.add("final_ln.gain".into(), vec![d], Ones);
        let final_ln_bias = b.add("final_ln.bias".into(), vec![d], Zeros);
        let flow_position_embedding = b.add("flow.position".into(), vec![c.max_utterances, d], Normal);
        let flow_blocks = (0..c.flow_layers)
            .map(|i| b.block(&format!("flow.block{i}"), d, c.d_ff))
            .collect();
        let generator_weight = b.add("generator.weight".into(), vec![2 * d, v], Normal);
        let generator_bias = b.add("generator.bias".into(), vec![v], Zeros);
        let bow_weight = b.add("bow.weight".into(), vec![d, v], Normal);
        let bow_bias = b.add("bow.bias".into(), vec![v], Zeros);
        Layout {
            names: b.names,
            shapes: b.shapes,
            inits: b.inits,
            token_embedding,
            segment_embedding,
            position_embedding,
            blocks,
            final_ln_gain,
            final_ln_bias,
            flow_position_embedding,
            flow_blocks,
            generator_weight,
            generator_bias,
            bow_weight,
            bow_bias,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// All trainable tensors of a model together with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    config: ModelConfig,
    layout: Layout,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> ModelParams<F> {
    /// Weights and embeddings ~ N(0, 0.02²); biases zero; layer-norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(shape, init)| match init {
                Init::Normal => Tensor::randn(shape, INIT_STD, &mut rng),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, F::one()),
            })
            .collect();
        Ok(ModelParams {
            config,
            layout,
            tensors,
        })
    }

    /// Rebuilds parameters from tensors given in layout order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if tensors.len() != layout.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((t, shape), name) in tensors.iter().zip(&layout.shapes).zip(&layout.names) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(ModelParams {
            config,
            layout,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<F>> {
        self.layout.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.layout.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let mut config = self.config.clone();
        config.precision = G::PRECISION;
        ModelParams {
            config,
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn with_dropout(mut self, dropout: f64) -> Self {
        self.config.dropout = dropout;
        self
    }
}

/// Encodes a dialogue within the model's limits, leaving room for
/// `reserve_positions` more tokens and `reserve_utterances` more utterances.
/// The oldest utterances are dropped first; `dropped_utterances` counts all of
/// them.
pub fn encode_for_model(
    config: &ModelConfig,
    dialogue: &TokenizedDialogue,
    reserve_positions: usize,
    reserve_utterances: usize,
) -> Result<EncodedDialogue> {
    let limit = config.max_utterances.saturating_sub(reserve_utterances).max(1);
    let skip = dialogue.utterances.len().saturating_sub(limit);
    let trimmed;
    let source = if skip > 0 {
        trimmed = TokenizedDialogue {
            utterances: dialogue.utterances[skip..].to_vec(),
            opening_speaker: dialogue.utterances[skip].speaker,
        };
        &trimmed
    } else {
        dialogue
    };
    let budget = config.max_positions.saturating_sub(reserve_positions);
    let mut e = encode_tokenized(source, budget)?;
    e.dropped_utterances += skip;
    Ok(e)
}
