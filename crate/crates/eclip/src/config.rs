//! Run configuration: model dimensions, training schedule, data generation.
//!
//! Configs load from JSON with unknown keys rejected; every field has a
//! desk-scale default so an empty object `{}` is a valid config file.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Network dimensions shared by encoders and the instance decoder.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Per-cell input feature dimension of image grids.
    pub input_dim: usize,
    /// Transformer width of both encoders.
    pub width: usize,
    /// Blocks per encoder.
    pub encoder_blocks: usize,
    /// Self-attention heads in encoder blocks.
    pub heads: usize,
    /// Hidden width of encoder feed-forward layers.
    pub ffn_hidden: usize,
    /// Joint embedding dimension D of the projections and decoder.
    pub embed_dim: usize,
    /// Maximum supported image token grid.
    pub grid_h: usize,
    pub grid_w: usize,
    /// Text vocabulary size; token 0 is reserved for the CLS slot.
    pub vocab_size: usize,
    /// Maximum text length in tokens, excluding the CLS slot.
    pub max_text_len: usize,
    /// Instance decoder depth L.
    pub decoder_blocks: usize,
    /// Instance queries T per sample (1 positive + T-1 negatives).
    pub num_queries: usize,
    /// Self-attention heads over query slots.
    pub decoder_heads: usize,
    /// Hidden width of decoder feed-forward layers.
    pub decoder_ffn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 16,
            width: 64,
            encoder_blocks: 2,
            heads: 4,
            ffn_hidden: 256,
            embed_dim: 64,
            grid_h: 8,
            grid_w: 8,
            vocab_size: 256,
            max_text_len: 16,
            decoder_blocks: 2,
            num_queries: 6,
            decoder_heads: 4,
            decoder_ffn_hidden: 256,
        }
    }
}

impl ModelConfig {
    /// Dimensions reported for the full-scale model; far beyond what the
    /// synthetic pipeline trains, but expressible for completeness.
    pub fn full_scale() -> Self {
        ModelConfig {
            input_dim: 16,
            width: 768,
            encoder_blocks: 12,
            heads: 8,
            ffn_hidden: 2048,
            embed_dim: 512,
            grid_h: 14,
            grid_w: 14,
            vocab_size: 30522,
            max_text_len: 64,
            decoder_blocks: 6,
            num_queries: 20,
            decoder_heads: 8,
            decoder_ffn_hidden: 2048,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.input_dim == 0 || self.width == 0 || self.embed_dim == 0 {
            return Err(invalid("input_dim, width, embed_dim must be positive"));
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return Err(invalid("encoder_blocks and decoder_blocks must be >= 1"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(invalid(format!(
                "heads ({}) must divide width ({})",
                self.heads, self.width
            )));
        }
        if self.decoder_heads == 0 || self.embed_dim % self.decoder_heads != 0 {
            return Err(invalid(format!(
                "decoder_heads ({}) must divide embed_dim ({})",
                self.decoder_heads, self.embed_dim
            )));
        }
        if self.ffn_hidden == 0 || self.decoder_ffn_hidden == 0 {
            return Err(invalid("ffn widths must be positive"));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(invalid("grid dimensions must be positive"));
        }
        if self.vocab_size < 2 {
            return Err(invalid("vocab_size must be >= 2 (token 0 is reserved)"));
        }
        if self.max_text_len == 0 {
            return Err(invalid("max_text_len must be >= 1"));
        }
        if self.num_queries < 2 {
            return Err(invalid("num_queries must be >= 2 (need negatives)"));
        }
        Ok(())
    }
}

/// Which block's assignment matrix feeds the entropy regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegTarget {
    /// Final decoder block only.
    #[default]
    FinalBlock,
    /// Mean of the regularizer over every block's matrix.
    AllBlocksMean,
}

/// Per-loss weights; zeroing a weight disables that objective.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub itc: f64,
    pub inter: f64,
    pub itm: f64,
    pub intra: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            itc: 1.0,
            inter: 1.0,
            itm: 1.0,
            intra: 1.0,
            reg: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Learning rate for encoder parameters (including projections).
    pub lr_encoders: f64,
    /// Learning rate for the decoder, match head, and temperature.
    pub lr_rest: f64,
    pub weight_decay: f64,
    /// Steps of linear learning-rate warmup at the start of training.
    pub warmup_steps: usize,
    /// Per-epoch exponential learning-rate decay factor.
    pub epoch_lr_decay: f64,
    pub loss_weights: LossWeights,
    /// Capacity of the momentum-representation queue.
    pub queue_capacity: usize,
    /// EMA coefficient for the momentum model.
    pub ema_momentum: f64,
    /// Initial temperature (stored internally as a log parameter).
    pub tau_init: f64,
    pub seed: u64,
    /// Noise scale for the re-augmented partner of single-source products.
    pub augment_sigma: f64,
    /// Minimum queue entries before the inter-product loss activates.
    pub inter_queue_warmup: usize,
    pub reg_target: RegTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            stage1_epochs: 10,
            stage2_epochs: 5,
            lr_encoders: 5e-4,
            lr_rest: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 50,
            epoch_lr_decay: 0.85,
            loss_weights: LossWeights::default(),
            queue_capacity: 512,
            ema_momentum: 0.998,
            tau_init: 0.07,
            seed: 0,
            augment_sigma: 0.1,
            inter_queue_warmup: 16,
            reg_target: RegTarget::FinalBlock,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), ConfigError> {
        if self.batch_size < 2 {
            return Err(invalid("batch_size must be >= 2 (in-batch negatives)"));
        }
        if self.batch_size < model.num_queries {
            return Err(invalid(format!(
                "batch_size ({}) must be >= num_queries ({}): negative prompts \
                 are drawn from distinct other products in the batch",
                self.batch_size, model.num_queries
            )));
        }
        if self.lr_encoders < 0.0 || self.lr_rest < 0.0 {
            return Err(invalid("learning rates must be >= 0"));
        }
        if self.weight_decay < 0.0 {
            return Err(invalid("weight_decay must be >= 0"));
        }
        if !(self.epoch_lr_decay > 0.0 && self.epoch_lr_decay <= 1.0) {
            return Err(invalid("epoch_lr_decay must be in (0, 1]"));
        }
        if self.queue_capacity < self.batch_size {
            return Err(invalid("queue_capacity must be >= batch_size"));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(invalid("ema_momentum must be in [0, 1]"));
        }
        if !(self.tau_init > 0.0) {
            return Err(invalid("tau_init must be positive"));
        }
        if self.augment_sigma < 0.0 {
            return Err(invalid("augment_sigma must be >= 0"));
        }
        for (name, w) in [
            ("itc", self.loss_weights.itc),
            ("inter", self.loss_weights.inter),
            ("itm", self.loss_weights.itm),
            ("intra", self.loss_weights.intra),
            ("reg", self.loss_weights.reg),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(invalid(format!("loss weight {name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Top-level config for training runs.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate(&self.model)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: PretrainConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Synthetic dataset generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub products: usize,
    /// Extra products written to a separate held-out manifest.
    pub holdout_products: usize,
    pub categories: usize,
    pub sources_per_product: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub input_dim: usize,
    /// Isotropic noise scale for background cells and instance-cell jitter.
    pub noise_sigma: f64,
    /// Instance box side lengths are drawn uniformly from [box_min, box_max].
    pub box_min: usize,
    pub box_max: usize,
    pub vocab_size: usize,
    /// Attribute tokens appended after the category token.
    pub attr_min: usize,
    pub attr_max: usize,
    /// Scale of the per-product jitter added to the category signature.
    pub signature_jitter: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            products: 200,
            holdout_products: 50,
            categories: 20,
            sources_per_product: 3,
            grid_h: 8,
            grid_w: 8,
            input_dim: 16,
            noise_sigma: 0.15,
            box_min: 3,
            box_max: 6,
            vocab_size: 256,
            attr_min: 3,
            attr_max: 6,
            signature_jitter: 0.25,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.products == 0 {
            return Err(invalid("products must be >= 1"));
        }
        if self.categories == 0 {
            return Err(invalid("categories must be >= 1"));
        }
        if self.sources_per_product == 0 {
            return Err(invalid("sources_per_product must be >= 1"));
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.input_dim == 0 {
            return Err(invalid("grid dimensions and input_dim must be positive"));
        }
        if self.box_min == 0 || self.box_min > self.box_max {
            return Err(invalid("need 1 <= box_min <= box_max"));
        }
        if self.box_max > self.grid_h.min(self.grid_w) {
            return Err(invalid(format!(
                "box_max ({}) does not fit the {}x{} grid",
                self.box_max, self.grid_h, self.grid_w
            )));
        }
        if self.vocab_size < 1 + self.categories + 1 {
            return Err(invalid(format!(
                "vocab_size ({}) too small: need 1 CLS slot + {} category tokens \
                 + at least one attribute token",
                self.vocab_size, self.categories
            )));
        }
        if self.attr_min > self.attr_max {
            return Err(invalid("need attr_min <= attr_max"));
        }
        if self.noise_sigma < 0.0 || self.signature_jitter < 0.0 {
            return Err(invalid("noise_sigma and signature_jitter must be >= 0"));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: GenConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Vocabulary id of a category's canonical text token.
    pub fn category_token(&self, category_id: u32) -> u32 {
        1 + category_id
    }

    /// First vocabulary id usable as an attribute token.
    pub fn attr_token_base(&self) -> u32 {
        1 + self.categories as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PretrainConfig::default().validate().unwrap();
        GenConfig::default().validate().unwrap();
        ModelConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn empty_json_object_is_a_full_default_config() {
        let cfg: PretrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, PretrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<PretrainConfig>(r#"{"modle": {}}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.1}"#).is_err());
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let cfg: PretrainConfig =
            serde_json::from_str(r#"{"train": {"batch_size": 8, "seed": 7}}"#).unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.stage1_epochs, 10);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn validation_catches_bad_dims() {
        let mut m = ModelConfig::default();
        m.heads = 3; // does not divide width 64
        assert!(m.validate().is_err());

        let mut cfg = PretrainConfig::default();
        cfg.train.batch_size = 4; // below num_queries 6
        assert!(cfg.validate().is_err());

        let mut g = GenConfig::default();
        g.box_max = 20; // larger than the 8x8 grid
        assert!(g.validate().is_err());
    }

    #[test]
    fn roundtrips_through_json() {
        let cfg = PretrainConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: PretrainConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
    }
}
