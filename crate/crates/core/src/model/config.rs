use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

/// Shape of a decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: 4 layers of 4 heads over a 128-wide residual stream.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        Self { n_layers: 4, n_heads: 4, d_model: 128, d_head: 32, d_mlp: 512, vocab_size, max_seq_len: 64, seed }
    }

    /// Small model used by the exhaustive-oracle tests.
    pub fn tiny(n_layers: usize, n_heads: usize, vocab_size: usize, seed: u64) -> Self {
        Self { n_layers, n_heads, d_model: 8 * n_heads, d_head: 8, d_mlp: 32 * n_heads, vocab_size, max_seq_len: 32, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(ModelError::InvalidConfig { field, reason: "must be positive".into() });
            }
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(ModelError::InvalidConfig {
                field: "d_head",
                reason: format!("n_heads ({}) x d_head ({}) != d_model ({})", self.n_heads, self.d_head, self.d_model),
            });
        }
        if self.max_seq_len < 32 {
            return Err(ModelError::InvalidConfig { field: "max_seq_len", reason: "must be at least 32".into() });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_width_must_tile_the_stream() {
        let mut c = ModelConfig::desk(100, 0);
        assert!(c.validate().is_ok());
        c.d_head = 30;
        assert!(matches!(c.validate(), Err(ModelError::InvalidConfig { field: "d_head", .. })));
    }

    #[test]
    fn short_context_rejected() {
        let mut c = ModelConfig::tiny(1, 1, 10, 0);
        c.max_seq_len = 16;
        assert!(c.validate().is_err());
    }
}
