//! Frozen hash-embedding text encoder.
//!
//! Prompts are lowercased and split on whitespace; each token is hashed into
//! a fixed vocabulary and looked up in a seeded random table. Sequences are
//! truncated or padded to a fixed length with a dedicated pad vector.

use candle_core::{DType, Device, IndexOp, Tensor};
use candle_nn::{Init, VarBuilder};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub dim: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            max_tokens: 16,
            dim: 64,
        }
    }
}

/// A `(max_tokens, dim)` prompt embedding.
#[derive(Debug, Clone)]
pub struct TextEmbedding(pub Tensor);

impl TextEmbedding {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.0.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    }
}

/// Lowercases and collapses runs of whitespace.
pub fn normalize_prompt(prompt: &str) -> String {
    prompt
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

// FNV-1a, 64 bit: stable across platforms and releases.
fn token_hash(token: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    config: TextEncoderConfig,
    store: ParamStore,
    table: Tensor,
    position: Tensor,
    pad: Tensor,
}

impl TextEncoder {
    pub fn new(config: &TextEncoderConfig, store: ParamStore, dtype: DType, device: &Device) -> Result<Self> {
        let vb: VarBuilder = store.var_builder(dtype, device);
        let table = vb.get_with_hints(
            (config.vocab_size, config.dim),
            "table",
            Init::Randn { mean: 0.0, stdev: 1.0 },
        )?;
        let position = vb.get_with_hints(
            (config.max_tokens, config.dim),
            "position",
            Init::Randn { mean: 0.0, stdev: 0.1 },
        )?;
        let pad = vb.get_with_hints((1, config.dim), "pad", Init::Randn { mean: 0.0, stdev: 1.0 })?;
        store.seal();
        Ok(Self {
            config: config.clone(),
            store,
            table,
            position,
            pad,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn tokenize(&self, prompt: &str) -> Result<Vec<u32>> {
        let norm = normalize_prompt(prompt);
        if norm.is_empty() {
            return Err(Error::InvalidArgument("prompt is empty".into()));
        }
        Ok(norm
            .split(' ')
            .take(self.config.max_tokens)
            .map(|t| (token_hash(t) % self.config.vocab_size as u64) as u32)
            .collect())
    }

    pub fn encode(&self, prompt: &str) -> Result<TextEmbedding> {
        let ids = self.tokenize(prompt)?;
        let n = ids.len();
        let ids_t = Tensor::new(ids.as_slice(), self.table.device())?;
        let tokens = (self.table.index_select(&ids_t, 0)? + self.position.i(0..n)?)?;
        let emb = if n < self.config.max_tokens {
            let pad = self.pad.broadcast_as((self.config.max_tokens - n, self.config.dim))?;
            Tensor::cat(&[&tokens, &pad], 0)?
        } else {
            tokens
        };
        Ok(TextEmbedding(emb.detach()))
    }

    pub fn frozen(&self) -> Result<Self> {
        Self::new(&self.config, self.store.frozen()?, self.table.dtype(), self.table.device())
    }
}
