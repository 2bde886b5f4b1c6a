//! Run configuration: a TOML file whose every field has a default, with
//! command-line flags layered on top.

use std::path::Path;

use secrepair_core::dataset::LossMode;
use secrepair_core::decode::DecodeConfig;
use secrepair_core::model::ModelConfig;
use secrepair_core::ppo::PpoConfig;
use secrepair_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// BPE vocabulary size, special tokens included.
    pub vocab_size: usize,
    pub loss_mode: LossMode,
    /// Pairs generated by `build-dataset --synthetic`.
    pub synthetic_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { vocab_size: 512, loss_mode: LossMode::Full, synthetic_pairs: 600 }
    }
}

/// Model shape; the vocabulary size comes from the tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let desk = ModelConfig::desk(0);
        Self { n_layers: desk.n_layers, n_heads: desk.n_heads, d_model: desk.d_model, d_ff: desk.d_ff, max_len: desk.max_len }
    }
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; `--seed` overrides it and it is copied into every stage.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub ppo: PpoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelShape::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig { max_new_tokens: 128, ..DecodeConfig::default() },
            ppo: PpoConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.decode.seed = seed;
        self.ppo.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dumped_config_reloads_identically() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(9);
        cfg.train.max_steps = Some(12);
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 3\n[model]\nd_model = 32\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.n_layers, ModelShape::default().n_layers);
        assert!(toml::from_str::<RunConfig>("[model]\nwidth = 1\n").is_err());
    }
}
