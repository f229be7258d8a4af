use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::{AdamW, AdamWConfig, TrainConfig};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFLW";
pub const CHECKPOINT_VERSION: u32 = 1;
const ALIGN: usize = 64;
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

/// Optimizer moments and counters, stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub skipped: u64,
    pub first_moment: Vec<Tensor<f32>>,
    pub second_moment: Vec<Tensor<f32>>,
}

impl OptimizerState {
    pub fn capture<F: Real>(opt: &AdamW<F>) -> Self {
        OptimizerState {
            config: opt.config,
            step: opt.step,
            skipped: opt.skipped,
            first_moment: opt.first_moment.iter().map(Tensor::cast).collect(),
            second_moment: opt.second_moment.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn restore<F: Real>(&self) -> AdamW<F> {
        AdamW {
            config: self.config,
            step: self.step,
            skipped: self.skipped,
            first_moment: self.first_moment.iter().map(Tensor::cast).collect(),
            second_moment: self.second_moment.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Everything needed to reload a model for inference or resume training.
///
/// Binary layout: magic `DFLW`, `u32` LE version, a JSON header, zero padding
/// to a 64-byte boundary, the tensors as contiguous `f32` LE arrays in header
/// order, then a `u64` LE FNV-1a hash of every preceding byte.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub vocab: Vocab,
    pub step: u64,
    pub train_config: Option<TrainConfig>,
    pub optimizer: Option<OptimizerState>,
    pub best_validation: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    config: AdamWConfig,
    step: u64,
    skipped: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    step: u64,
    best_validation: Option<f64>,
    vocab: Vec<String>,
    optimizer: Option<OptimizerMeta>,
    tensors: Vec<TensorEntry>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Content hash stored in the trailer of a serialized checkpoint, as 16 hex
/// digits.
pub fn checkpoint_hash(bytes: &[u8]) -> Result<String> {
    if bytes.len() < 8 {
        return Err(bad("file too short"));
    }
    let trailer: [u8; 8] = bytes[bytes.len() - 8..].try_into().expect("8 bytes");
    Ok(format!("{:016x}", u64::from_le_bytes(trailer)))
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>, vocab: Vocab) -> Self {
        Checkpoint {
            params,
            vocab,
            step: 0,
            train_config: None,
            optimizer: None,
            best_validation: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names = self.params.layout().names();
        let mut named: Vec<(String, &Tensor<f32>)> = names.iter().cloned().zip(self.params.tensors()).collect();
        if let Some(o) = &self.optimizer {
            if o.first_moment.len() != names.len() || o.second_moment.len() != names.len() {
                return Err(bad("optimizer state does not match the parameter list"));
            }
            named.extend(names.iter().map(|n| format!("{M_PREFIX}{n}")).zip(&o.first_moment));
            named.extend(names.iter().map(|n| format!("{V_PREFIX}{n}")).zip(&o.second_moment));
        }
        let mut offset = 0;
        let tensors = named
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel() * 4;
                e
            })
            .collect();
        let header = Header {
            model_config: self.params.config().clone(),
            train_config: self.train_config.clone(),
            step: self.step,
            best_validation: self.best_validation,
            vocab: self.vocab.corpus_tokens().to_vec(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                config: o.config,
                step: o.step,
                skipped: o.skipped,
            }),
            tensors,
        };

        let mut out = Vec::with_capacity(offset + 4096);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        serde_json::to_writer(&mut out, &header)?;
        out.resize(out.len().div_ceil(ALIGN) * ALIGN, 0);
        for (_, t) in &named {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let hash = fnv1a(&out);
        out.extend_from_slice(&hash.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(bad("file too short"));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        if fnv1a(body) != stored {
            return Err(bad("content hash mismatch (truncated or corrupted file)"));
        }
        if &body[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut stream = serde_json::Deserializer::from_slice(&body[8..]).into_iter::<Header>();
        let header = stream
            .next()
            .ok_or_else(|| bad("missing header"))?
            .map_err(|e| bad(format!("header: {e}")))?;
        let header_end = 8 + stream.byte_offset();
        let data_start = header_end.div_ceil(ALIGN) * ALIGN;
        if data_start > body.len() || body[header_end..data_start].iter().any(|&b| b != 0) {
            return Err(bad("malformed header padding"));
        }
        let data = &body[data_start..];

        let mut tensors = std::collections::HashMap::new();
        let mut expected_offset = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.offset + n * 4 > data.len() {
                return Err(bad(format!("tensor {} lies outside the data section", e.name)));
            }
            let values = data[e.offset..e.offset + n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            expected_offset += n * 4;
            let t = Tensor::new(e.shape.clone(), values).map_err(|err| bad(format!("{}: {err}", e.name)))?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(bad(format!("duplicate tensor {}", e.name)));
            }
        }
        if expected_offset != data.len() {
            return Err(bad("trailing bytes after tensor data"));
        }

        let config = header.model_config;
        config.validate()?;
        let names = crate::model::Layout::new(&config).names().to_vec();
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))
        };
        let params = names.iter().map(|n| take(n)).collect::<Result<Vec<_>>>()?;
        let optimizer = match header.optimizer {
            Some(meta) => Some(OptimizerState {
                config: meta.config,
                step: meta.step,
                skipped: meta.skipped,
                first_moment: names
                    .iter()
                    .map(|n| take(&format!("{M_PREFIX}{n}")))
                    .collect::<Result<_>>()?,
                second_moment: names
                    .iter()
                    .map(|n| take(&format!("{V_PREFIX}{n}")))
                    .collect::<Result<_>>()?,
            }),
            None => None,
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        let vocab = Vocab::from_tokens(header.vocab)?;
        if vocab.len() != config.vocab_size {
            return Err(bad(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        Ok(Checkpoint {
            params: ModelParams::from_tensors(config, params)?,
            vocab,
            step: header.step,
            train_config: header.train_config,
            optimizer,
            best_validation: header.best_validation,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::load_with_hash(path)?.0)
    }

    /// Loads a checkpoint along with its content hash.
    pub fn load_with_hash(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Self::from_bytes(&bytes)?;
        Ok((ckpt, checkpoint_hash(&bytes)?))
    }
}
