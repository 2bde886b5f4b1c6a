//! Decoder-only causal transformer language model.
//!
//! Pre-norm blocks (LayerNorm → causal multi-head attention → residual,
//! LayerNorm → GELU MLP → residual), learned absolute positions, a final
//! LayerNorm, and an LM head tied to the token embedding. All parameters live
//! in one flat `Vec<f64>` described by a [`Layout`] of named tensors; values are
//! kept representable as `f32` so checkpoints round-trip bit-exactly.

mod backward;
mod forward;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backward::scored_targets;
pub use forward::{DecodeState, ForwardCache, StepOutput};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input sequence is empty")]
    EmptyInput,
    #[error("sequence length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("token id {id} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("loss mask selects no positions")]
    EmptyMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl ModelConfig {
    /// CPU-trainable default: 2 layers, 4 heads, width 128, MLP 512, 256 positions.
    pub fn desk(vocab_size: usize) -> Self {
        Self { n_layers: 2, n_heads: 4, d_model: 128, d_ff: 512, vocab_size, max_len: 256 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `key=value` lines, the checkpoint's config block.
    pub fn to_kv(&self) -> String {
        format!(
            "n_layers={}\nn_heads={}\nd_model={}\nd_ff={}\nvocab_size={}\nmax_len={}\n",
            self.n_layers, self.n_heads, self.d_model, self.d_ff, self.vocab_size, self.max_len
        )
    }

    pub fn from_kv(text: &str) -> Result<Self, ModelError> {
        let get = |key: &str| -> Result<usize, ModelError> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .and_then(|(_, v)| v.trim().parse().ok())
                .ok_or_else(|| ModelError::InvalidConfig(format!("missing or malformed `{key}`")))
        };
        let cfg = Self {
            n_layers: get("n_layers")?,
            n_heads: get("n_heads")?,
            d_model: get("d_model")?,
            d_ff: get("d_ff")?,
            vocab_size: get("vocab_size")?,
            max_len: get("max_len")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerSlots {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub qkv_w: Range<usize>,
    pub qkv_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub fc_w: Range<usize>,
    pub fc_b: Range<usize>,
    pub proj_w: Range<usize>,
    pub proj_b: Range<usize>,
}

/// Named tensor placement inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    pub(crate) tok_emb: Range<usize>,
    pub(crate) pos_emb: Range<usize>,
    pub(crate) layers: Vec<LayerSlots>,
    pub(crate) lnf_g: Range<usize>,
    pub(crate) lnf_b: Range<usize>,
    total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            let start = specs.last().map_or(0, |s: &TensorSpec| s.range.end);
            let range = start..start + shape.iter().product::<usize>();
            specs.push(TensorSpec { name, shape, range: range.clone() });
            range
        };
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let tok_emb = add("tok_emb".into(), vec![cfg.vocab_size, d]);
        let pos_emb = add("pos_emb".into(), vec![cfg.max_len, d]);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let mut t = |suffix: &str, shape: Vec<usize>| add(format!("layers.{l}.{suffix}"), shape);
                LayerSlots {
                    ln1_g: t("ln1.gain", vec![d]),
                    ln1_b: t("ln1.bias", vec![d]),
                    qkv_w: t("attn.qkv.weight", vec![3 * d, d]),
                    qkv_b: t("attn.qkv.bias", vec![3 * d]),
                    out_w: t("attn.out.weight", vec![d, d]),
                    out_b: t("attn.out.bias", vec![d]),
                    ln2_g: t("ln2.gain", vec![d]),
                    ln2_b: t("ln2.bias", vec![d]),
                    fc_w: t("mlp.fc.weight", vec![f, d]),
                    fc_b: t("mlp.fc.bias", vec![f]),
                    proj_w: t("mlp.proj.weight", vec![d, f]),
                    proj_b: t("mlp.proj.bias", vec![d]),
                }
            })
            .collect();
        let lnf_g = add("final_ln.gain".into(), vec![d]);
        let lnf_b = add("final_ln.bias".into(), vec![d]);
        let total = specs.last().map_or(0, |s| s.range.end);
        Self { specs, tok_emb, pos_emb, layers, lnf_g, lnf_b, total }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

/// Rounds to the nearest `f32`, the storage precision of checkpoints.
pub fn to_storage(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalLM {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl CausalLM {
    /// Gaussian init (std 0.02, residual projections scaled by
    /// `1/sqrt(2 n_layers)`), unit LayerNorm gains, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        for spec in layout.specs() {
            let slot = &mut params[spec.range.clone()];
            let name = spec.name.as_str();
            if name.ends_with(".gain") {
                slot.fill(1.0);
            } else if name.ends_with(".bias") {
                slot.fill(0.0);
            } else {
                let s = if name.ends_with("attn.out.weight") || name.ends_with("mlp.proj.weight") { resid_std } else { std };
                let normal = Normal::new(0.0, s).expect("positive std");
                for p in slot.iter_mut() {
                    *p = to_storage(normal.sample(&mut rng));
                }
            }
        }
        Ok(Self { config, layout, params })
    }

    /// Builds a model around existing parameters (checkpoint loading).
    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|s| &self.params[s.range.clone()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.find(name)?.range.clone();
        Some(&mut self.params[range])
    }

    /// Rounds every parameter to storage precision.
    pub fn round_to_storage(&mut self) {
        for p in &mut self.params {
            *p = to_storage(*p);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub(crate) fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if ids.len() > self.config.max_len {
            return Err(ModelError::TooLong { len: ids.len(), max_len: self.config.max_len });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab_size: self.config.vocab_size });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
