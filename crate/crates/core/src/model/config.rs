use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the MLP reads its input from inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wiring {
    /// MLP reads the block input, like GPT-J.
    Parallel,
    /// MLP reads the block input plus the attention output, like Llama.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub wiring: Wiring,
    pub final_layer_norm: bool,
    pub decoder_bias: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, value) in sizes {
            if value == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len", "must be at least 2"));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::config(
                "d_model",
                format!(
                    "{} is not n_heads ({}) x d_head ({})",
                    self.d_model, self.n_heads, self.d_head
                ),
            ));
        }
        Ok(())
    }

    /// Builds a config with `d_head` derived from `d_model / n_heads`.
    ///
    /// Fails when the division is not exact.
    pub fn with_heads(
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Result<Self> {
        if n_heads == 0 {
            return Err(Error::config("n_heads", "must be at least 1"));
        }
        if !d_model.is_multiple_of(n_heads) {
            return Err(Error::config(
                "d_model",
                format!("{d_model} is not divisible by n_heads {n_heads}"),
            ));
        }
        let config = ModelConfig {
            d_model,
            n_layers,
            n_heads,
            d_head: d_model / n_heads,
            d_mlp: 4 * d_model,
            vocab_size,
            max_seq_len,
            wiring: Wiring::Parallel,
            final_layer_norm: true,
            decoder_bias: false,
            seed: 0,
        };
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indivisible_heads_rejected() {
        let err = ModelConfig::with_heads(8, 2, 3, 16, 8).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "d_model"));
    }

    #[test]
    fn zero_sizes_name_the_field() {
        let mut cfg = ModelConfig::with_heads(8, 2, 2, 16, 8).unwrap();
        cfg.d_mlp = 0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("d_mlp"), "{err}");
        cfg.d_mlp = 4;
        cfg.max_seq_len = 1;
        assert!(cfg.validate().unwrap_err().to_string().contains("max_seq_len"));
    }

    #[test]
    fn mismatched_head_product() {
        let mut cfg = ModelConfig::with_heads(8, 2, 2, 16, 8).unwrap();
        cfg.d_head = 3;
        assert!(cfg.validate().is_err());
    }
}
