//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the probe's feature-scaling hook multiplies the hidden state.
/// The residual-stream output of the block is the canonical choice; the
/// FFN output (before the residual add) is kept as a testable alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalePoint {
    #[default]
    ResidualOut,
    FfnOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq: usize,
    pub n_visual_tokens: usize,
    pub seed: u64,
    #[serde(default)]
    pub scale_point: ScalePoint,
}

impl Default for ModelConfig {
    /// Desk-scale default: big enough for the layer search to be
    /// meaningful, small enough for seconds-scale runs.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 48,
            n_layers: 8,
            n_heads: 4,
            d_ffn: 128,
            max_seq: 64,
            n_visual_tokens: 4,
            seed: 0,
            scale_point: ScalePoint::ResidualOut,
        }
    }
}

impl ModelConfig {
    /// Pipeline-facing validation. Hand-built test rigs may construct
    /// smaller models directly; anything loaded from a config file or
    /// checkpoint must pass this.
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 || self.vocab_size == 0 {
            return Err(Error::Config("model dimensions must be nonzero".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 6 {
            return Err(Error::Config(format!(
                "n_layers {} < 6 leaves the layer-search range degenerate",
                self.n_layers
            )));
        }
        if self.max_seq <= self.n_visual_tokens {
            return Err(Error::Config(format!(
                "max_seq {} leaves no room after {} visual tokens",
                self.max_seq, self.n_visual_tokens
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn shallow_model_rejected() {
        let cfg = ModelConfig {
            n_layers: 4,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn head_divisibility_rejected() {
        let cfg = ModelConfig {
            d_model: 50,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
