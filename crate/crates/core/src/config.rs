//! Run configuration as TOML with `[data]`, `[model]` and `[train]` tables.
//!
//! Every field has a default, so a config file only lists what it changes.
//! Unknown keys are rejected. [`RunConfig::to_toml`] is the canonical text
//! form stored in checkpoints and manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::encoder::{Activation, EncoderConfig, InputKind};
use crate::error::{Error, Result};
use crate::hgnn::Variant;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_classes: usize,
    pub pairs_per_class: usize,
    pub side: usize,
    pub patch_dim: usize,
    pub motif_strength: f64,
    pub motif_patches_per_class: usize,
    pub noise_std: f64,
    pub vocab_size: usize,
    pub tokens_per_class: usize,
    pub text_len: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            num_classes: s.num_classes,
            pairs_per_class: s.pairs_per_class,
            side: s.side,
            patch_dim: s.patch_dim,
            motif_strength: s.motif_strength,
            motif_patches_per_class: s.motif_patches_per_class,
            noise_std: s.noise_std,
            vocab_size: s.vocab_size,
            tokens_per_class: s.tokens_per_class,
            text_len: s.text_len,
            train_fraction: 0.7,
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_hidden: usize,
    pub activation: Activation,
    /// Longest token sequence the text encoder accepts (captions and prompts).
    pub max_len: usize,
    pub lora: bool,
    pub rank: usize,
    pub gamma: f64,
    pub hgnn_image: bool,
    pub hgnn_text: bool,
    pub variant: Variant,
    pub k: usize,
    pub d_prime: usize,
    pub tau_init: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let toy = ModelConfig::toy();
        let InputKind::Text { max_len, .. } = toy.text.input else {
            unreachable!("toy text encoder")
        };
        Self {
            layers: toy.image.num_layers,
            heads: toy.image.num_heads,
            model_dim: toy.image.model_dim,
            mlp_hidden: toy.image.mlp_hidden,
            activation: toy.image.activation,
            max_len,
            lora: toy.lora,
            rank: toy.rank,
            gamma: toy.gamma,
            hgnn_image: toy.hgnn_image,
            hgnn_text: toy.hgnn_text,
            variant: toy.variant,
            k: toy.k,
            d_prime: toy.d_prime,
            tau_init: toy.tau_init,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Every random choice (data, backbone, adapters, shuffling) derives from this.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn synth(&self) -> SynthConfig {
        let d = &self.data;
        SynthConfig {
            num_classes: d.num_classes,
            pairs_per_class: d.pairs_per_class,
            side: d.side,
            patch_dim: d.patch_dim,
            motif_strength: d.motif_strength,
            motif_patches_per_class: d.motif_patches_per_class,
            noise_std: d.noise_std,
            vocab_size: d.vocab_size,
            tokens_per_class: d.tokens_per_class,
            text_len: d.text_len,
            seed: self.seed,
        }
    }

    pub fn fractions(&self) -> (f64, f64, f64) {
        (self.data.train_fraction, self.data.val_fraction, self.data.test_fraction)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let enc = |input| EncoderConfig {
            num_layers: m.layers,
            num_heads: m.heads,
            model_dim: m.model_dim,
            mlp_hidden: m.mlp_hidden,
            input,
            activation: m.activation,
        };
        ModelConfig {
            image: enc(InputKind::Image {
                side: self.data.side,
                patch_dim: self.data.patch_dim,
            }),
            text: enc(InputKind::Text {
                vocab_size: self.data.vocab_size,
                max_len: m.max_len,
            }),
            lora: m.lora,
            rank: m.rank,
            gamma: m.gamma,
            hgnn_image: m.hgnn_image,
            hgnn_text: m.hgnn_text,
            variant: m.variant,
            k: m.k,
            d_prime: m.d_prime,
            tau_init: m.tau_init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth().validate()?;
        self.model_config().validate()?;
        self.train.validate()?;
        if self.model.max_len < self.data.text_len {
            return Err(Error::InvalidConfig(format!(
                "max_len {} is shorter than text_len {}",
                self.model.max_len, self.data.text_len
            )));
        }
        let f = self.fractions();
        if [f.0, f.1, f.2].iter().any(|x| !(0.0..=1.0).contains(x)) || (f.0 + f.1 + f.2 - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("split fractions {f:?} must sum to 1")));
        }
        Ok(())
    }
}
