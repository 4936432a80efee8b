// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and seed of a decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The 4-layer, 4-head toy used throughout the experiments.
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_ff: 256,
            vocab_size,
            max_seq: 12,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.max_seq < 2 {
            return Err(Error::Config("max_seq must be at least 2".into()));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model ({}) must equal n_heads × d_head ({} × {})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        Ok(())
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_head_width() {
        let mut c = ModelConfig::toy(64, 0);
        assert!(c.validate().is_ok());
        c.d_head = 15;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::toy(64, 0);
        c.max_seq = 1;
        assert!(c.validate().is_err());
    }
}
