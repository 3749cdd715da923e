//! Declarative run configuration (TOML) with a stable content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augbuf::ScaleAugmentConfig;
use crate::data::PatchOptions;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::{ClassMode, ModelConfig};
use crate::optim::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Number of training iterations (default 2000).
    pub iterations: u64,
    /// Adam learning rate (default 2e-4, no decay).
    pub lr: f64,
    /// Adam `(β1, β2)` (default `[0.5, 0.999]`).
    pub adam_betas: [f64; 2],
    /// Seed for initialization, data order and all stochastic choices (default 0).
    pub seed: u64,
    /// Square training patch side (default 256).
    pub patch_size: usize,
    /// Replay buffer capacity (default 50).
    pub buffer_capacity: usize,
    /// Negative vectors per anchor pixel in the contrastive loss (default 256;
    /// `0` keeps all).
    pub max_negatives: usize,
    pub augment: ScaleAugmentConfig,
    /// Checkpoint interval in iterations (default 1000); a final checkpoint is
    /// always written.
    pub checkpoint_every: u64,
    /// Loss-log interval in iterations (default 1).
    pub log_every: u64,
    /// Patches per domain used to estimate output-bias medians (default 16).
    pub median_patches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 2e-4,
            adam_betas: [0.5, 0.999],
            seed: 0,
            patch_size: 256,
            buffer_capacity: 50,
            max_negatives: 256,
            augment: ScaleAugmentConfig::default(),
            checkpoint_every: 1000,
            log_every: 1,
            median_patches: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfiguration(m.to_string()));
        if self.iterations < 1 {
            return bad("iterations must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !self.adam_betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.patch_size == 0 || self.buffer_capacity == 0 || self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("patch_size, buffer_capacity, checkpoint_every and log_every must be positive");
        }
        self.augment.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.adam_betas[0], beta2: self.adam_betas[1], ..AdamConfig::default() }
    }

    pub fn max_negatives(&self) -> Option<usize> {
        (self.max_negatives > 0).then_some(self.max_negatives)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub domain_a: Option<PathBuf>,
    pub domain_b: Option<PathBuf>,
    /// Resize sources to this square side before cropping (default none).
    pub resize_to: Option<usize>,
    /// Random horizontal/vertical flips (default on).
    pub flips: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { domain_a: None, domain_b: None, resize_to: None, flips: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Loss weights; when absent, the preset for the model's class mode is
    /// used (three-class: segmentation weights, two-class: unmixing weights).
    pub losses: Option<LossWeights>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::InvalidConfiguration(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfiguration(e.to_string()))
    }

    pub fn weights(&self) -> LossWeights {
        self.losses.unwrap_or(match self.model.mode {
            ClassMode::ThreeClass => LossWeights::segmentation(),
            ClassMode::TwoClass => LossWeights::unmixing(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.weights().validate()?;
        let weights = self.weights();
        if weights.id > 0.0 && !self.model.identity_enabled() {
            return Err(Error::InvalidConfiguration(
                "identity loss needs channels_a == channels_b; set losses.id = 0".into(),
            ));
        }
        if self.train.patch_size % self.model.divisor() != 0 {
            return Err(Error::InvalidConfiguration(format!(
                "patch_size {} must be divisible by {}",
                self.train.patch_size,
                self.model.divisor()
            )));
        }
        Ok(())
    }

    pub fn patch_options(&self) -> PatchOptions {
        PatchOptions { patch_size: self.train.patch_size, resize_to: self.data.resize_to, flips: self.data.flips }
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.iterations, 2000);
        assert_eq!(c.model.base_width, 64);
        assert_eq!(c.weights(), LossWeights::segmentation());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml_str("[train]\nitrations = 3\n"), Err(Error::InvalidConfiguration(_))));
        assert!(matches!(RunConfig::from_toml_str("[extra]\n"), Err(Error::InvalidConfiguration(_))));
    }

    #[test]
    fn two_class_uses_unmixing_preset() {
        let c = RunConfig::from_toml_str("[model]\nchannels_a = 2\nchannels_b = 1\nmode = \"two-class\"\n").unwrap();
        assert_eq!(c.weights(), LossWeights::unmixing());
        c.validate().unwrap();
    }

    #[test]
    fn round_trip_and_hash() {
        let mut c = RunConfig::default();
        c.train.seed = 9;
        let back = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn validation_errors() {
        let mut c = RunConfig::default();
        c.train.iterations = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.train.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.train.patch_size = 100;
        assert!(c.validate().is_err());
    }
}
