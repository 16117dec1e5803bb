//! A small decoder-only transformer that decodes over a [`KvCache`].
//!
//! Pre-norm blocks (RMSNorm, multi-head attention, SiLU feed-forward), learned
//! absolute position embeddings indexed by cache position, an output head
//! over the full vocabulary and a feature head applied to the outputs of the
//! learnable image queries.
//!
//! [`KvCache`]: crate::cachepolicy::KvCache

pub mod batch;
mod generate;
mod params;
mod step;

pub use generate::{
    dense_oracle_divergence, generate, teacher_forced_divergence, AttentionDump, DecodeMode,
    Divergence, GenerateOptions, Generation, GenerationTrace,
};
pub use params::{LayerParams, Params};
pub use step::StepOutput;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::cachepolicy::{CacheDims, CachePolicy, KvCache};
use crate::seqmodel::SeqConfig;
use crate::{Error, Result};

/// Bytes per cached scalar (`f64`).
pub const SCALAR_WIDTH: usize = 8;

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub seq: SeqConfig,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Number of learnable image queries.
    pub queries: usize,
    /// Size of the position-embedding table.
    pub max_positions: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            seq: SeqConfig::desk(),
            layers: 2,
            heads: 2,
            d_model: 64,
            d_ff: 128,
            queries: 4,
            max_positions: 4096,
            seed: 0,
        }
    }

    pub fn paper_faithful() -> Self {
        ModelConfig {
            seq: SeqConfig::paper_faithful(),
            queries: 64,
            ..Self::desk()
        }
    }

    /// One layer, one head, `d_model = 8`: small enough for finite differences.
    pub fn tiny() -> Self {
        ModelConfig {
            seq: SeqConfig {
                image_block_len: 4,
                text_vocab: 16,
                d_feat: 4,
            },
            layers: 1,
            heads: 1,
            d_model: 8,
            d_ff: 16,
            queries: 2,
            max_positions: 128,
            seed: 0,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn vocab_size(&self) -> usize {
        self.seq.vocab_size()
    }

    pub fn cache_dims(&self) -> CacheDims {
        CacheDims {
            layers: self.layers,
            heads: self.heads,
            d_head: self.d_head(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.seq.validate()?;
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("queries", self.queries),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by heads ({})",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    /// Longest training sequence seen by `train_toy`, if trained.
    pub trained_len: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorFile {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trained_len: Option<usize>,
    tensors: Vec<TensorFile>,
}

impl Model {
    /// Seeded initialisation from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Model {
            params: Params::init(&config, &mut rng),
            config,
            trained_len: None,
        })
    }

    /// A fresh cache sized for this model. Strict caches reject grammar
    /// violations; lenient ones record them.
    pub fn new_cache(&self, policy: CachePolicy, strict: bool) -> Result<KvCache> {
        let (dims, m) = (self.config.cache_dims(), self.config.seq.image_block_len);
        if strict {
            KvCache::new(policy, dims, m)
        } else {
            KvCache::new_lenient(policy, dims, m)
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let tensors = self
            .params
            .tensors()
            .into_iter()
            .map(|(name, shape, data)| TensorFile {
                name,
                shape,
                data: data.to_vec(),
            })
            .collect();
        Ok(serde_json::to_string(&ModelFile {
            config: self.config,
            trained_len: self.trained_len,
            tensors,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        let mut model = Model::new(file.config)?;
        model.trained_len = file.trained_len;
        let mut slots = model.params.tensors_mut();
        if slots.len() != file.tensors.len() {
            return Err(Error::Validation(format!(
                "model file has {} tensors, expected {}",
                file.tensors.len(),
                slots.len()
            )));
        }
        for ((name, shape, slot), t) in slots.iter_mut().zip(file.tensors) {
            if *name != t.name || *shape != t.shape || slot.len() != t.data.len() {
                return Err(Error::Validation(format!(
                    "tensor {:?} {:?} does not match expected {name:?} {shape:?}",
                    t.name, t.shape
                )));
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {name}")));
            }
            slot.copy_from_slice(&t.data);
        }
        drop(slots);
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub(crate) fn rms_norm(x: &[f64], gain: &[f64], out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}
