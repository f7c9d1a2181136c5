use serde::{Deserialize, Serialize};

use super::LmError;

/// Architecture of the tiny decoder-only model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Hard cap on sequence length (prompt + completion). The generation cap
    /// used at real scale (2048) is just a larger value of this field.
    pub context_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl LmConfig {
    /// Desk-scale default; `vocab_size` is filled in once a vocabulary exists.
    pub fn desk_scale(vocab_size: usize, seed: u64) -> Self {
        LmConfig {
            n_layers: 1,
            d_model: 32,
            n_heads: 4,
            d_ff: 128,
            context_len: 256,
            vocab_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.vocab_size == 0
        {
            return Err(LmError::InvalidConfig("all counts must be >= 1".into()));
        }
        if self.context_len < 2 {
            return Err(LmError::InvalidConfig("context_len must be >= 2".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(LmError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
