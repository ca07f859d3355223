use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Layers are indexed from 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_eps: f64,
    pub rope_base: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "n_heads·d_head = {}·{} does not equal d_model = {}",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_head must be even for rotary embeddings, got {}",
                self.d_head
            )));
        }
        if !(self.norm_eps > 0.0) || !(self.rope_base > 0.0) {
            return Err(Error::Config("norm_eps and rope_base must be positive".into()));
        }
        Ok(())
    }

    /// Total number of scalar parameters implied by the shapes.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 4 * self.n_heads * d * self.d_head + 3 * d * self.d_mlp;
        2 * self.vocab_size * d + d + self.n_layers * per_layer
    }

    #[cfg(test)]
    pub(crate) fn tiny_for_tests() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 12,
            vocab_size: 11,
            max_seq: 16,
            norm_eps: 1e-5,
            rope_base: 10000.0,
        }
    }
}
