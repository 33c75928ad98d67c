//! Run configuration: one JSON document covering every component, with
//! strict (unknown-field-rejecting) parsing and cross-component checks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregator::AggregatorConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{MbcError, Result};
use crate::training::TrainConfig;

/// Quantizer hyperparameters. `n_codes` x encoder dim entries; usage decay
/// gamma, dead threshold epsilon, commitment cost beta.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub n_codes: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub beta_commit: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig { n_codes: 64, gamma: 0.99, epsilon: 1e-4, beta_commit: 0.25 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub aggregator: AggregatorConfig,
    pub decoder: DecoderConfig,
    pub quantizer: QuantizerConfig,
    pub training: TrainConfig,
    /// Generation cap during answering.
    pub max_answer_tokens: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            encoder: EncoderConfig::default(),
            aggregator: AggregatorConfig::default(),
            decoder: DecoderConfig::default(),
            quantizer: QuantizerConfig::default(),
            training: TrainConfig::default(),
            max_answer_tokens: 8,
        }
    }
}

impl RunConfig {
    pub fn toy_default() -> Self {
        let mut cfg = RunConfig::default();
        cfg.decoder.vocab_size = cfg.encoder.vocab_size;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.aggregator.validate()?;
        self.decoder.validate()?;
        let d = self.encoder.embed_dim;
        if self.aggregator.dim != d || self.decoder.embed_dim != d {
            return Err(MbcError::Config(format!(
                "dims disagree: encoder {d}, aggregator {}, decoder {}",
                self.aggregator.dim, self.decoder.embed_dim
            )));
        }
        if self.aggregator.tokens != self.encoder.output_tokens {
            return Err(MbcError::Config(format!(
                "aggregator expects {} tokens per entry, encoder emits {}",
                self.aggregator.tokens, self.encoder.output_tokens
            )));
        }
        if self.decoder.vocab_size != self.encoder.vocab_size {
            return Err(MbcError::Config(format!(
                "vocab sizes disagree: encoder {}, decoder {}",
                self.encoder.vocab_size, self.decoder.vocab_size
            )));
        }
        if self.quantizer.n_codes < 2 {
            return Err(MbcError::Config("quantizer needs at least 2 codes".into()));
        }
        if !(0.0 < self.quantizer.gamma && self.quantizer.gamma < 1.0)
            || self.quantizer.epsilon <= 0.0
            || self.quantizer.beta_commit <= 0.0
        {
            return Err(MbcError::Config(
                "quantizer needs gamma in (0,1), epsilon > 0, beta > 0".into(),
            ));
        }
        if self.max_answer_tokens == 0 {
            return Err(MbcError::Config("max_answer_tokens must be >= 1".into()));
        }
        self.training.validate()
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = RunConfig::toy_default();
        cfg.validate().unwrap();
        let text = cfg.to_canonical_json().unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back.to_canonical_json().unwrap(), text);
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&RunConfig::toy_default().to_canonical_json().unwrap()).unwrap();
        v["banana"] = 1.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
        let mut v2: serde_json::Value =
            serde_json::from_str(&RunConfig::toy_default().to_canonical_json().unwrap()).unwrap();
        v2["encoder"]["banana"] = 1.into();
        assert!(RunConfig::from_json(&v2.to_string()).is_err());
    }

    #[test]
    fn cross_component_checks() {
        let mut cfg = RunConfig::toy_default();
        cfg.aggregator.dim = 32;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::toy_default();
        cfg.decoder.vocab_size += 1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::toy_default();
        cfg.aggregator.tokens = cfg.encoder.output_tokens + 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_json_uses_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 7}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.quantizer.n_codes, 64);
        assert_eq!(cfg.max_answer_tokens, 8);
    }
}
