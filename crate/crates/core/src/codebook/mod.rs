//! Discrete code representation: relaxation of code logits, discretization,
//! code-space statistics and size accounting.

mod accounting;
mod relax;
mod stats;
mod table;

pub use accounting::{
    code_bits, digit_bits, embedding_layer_bits, embedding_params_count, scalar_quantized_bits,
    FullBitsConvention, LayerSize,
};
pub use relax::{
    entropy_node, entropy_regularizer, init_logits, straight_through, tempering_softmax,
    ENTROPY_FLOOR,
};
pub use stats::{code_space_stats, min_dimension, no_collision_probability, CodeSpaceStats, EXACT_PRODUCT_LIMIT};
pub use table::{extract_codes, DiscreteCodeTable};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Shape of a KD code system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeConfig {
    /// Vocabulary size `N`.
    pub vocab: usize,
    /// Cardinality `K` of every digit.
    pub k: usize,
    /// Number of digits `D`.
    pub dims: usize,
    /// Width `d'` of each code embedding.
    pub code_dim: usize,
    /// Allows `K^D < N`, where several symbols must share a code.
    pub lossy: bool,
}

impl CodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 {
            return Err(Error::invalid("vocabulary must be non-empty"));
        }
        if self.k < 2 {
            return Err(Error::invalid(format!("K must be at least 2, got {}", self.k)));
        }
        if self.dims == 0 || self.code_dim == 0 {
            return Err(Error::invalid("D and d' must be positive"));
        }
        if !self.lossy && !self.covers_vocab() {
            return Err(Error::invalid(format!(
                "K^D = {}^{} cannot give {} symbols distinct codes; set lossy to allow sharing",
                self.k, self.dims, self.vocab
            )));
        }
        Ok(())
    }

    /// Whether `K^D ≥ N`.
    pub fn covers_vocab(&self) -> bool {
        code_space_size(self.k, self.dims) >= self.vocab as f64
    }
}

/// `K^D` as a float (exact up to 2^53).
pub fn code_space_size(k: usize, dims: usize) -> f64 {
    (k as f64).powi(dims as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lossy_flag_gates_small_code_spaces() {
        let mut cfg = CodeConfig { vocab: 10_000, k: 6, dims: 4, code_dim: 8, lossy: false };
        assert!(cfg.validate().is_err());
        cfg.lossy = true;
        cfg.validate().unwrap();
        let compact = CodeConfig { vocab: 1296, k: 6, dims: 4, code_dim: 8, lossy: false };
        compact.validate().unwrap();
    }

    #[test]
    fn rejects_degenerate_shapes() {
        let bad = CodeConfig { vocab: 4, k: 1, dims: 4, code_dim: 8, lossy: true };
        assert!(bad.validate().is_err());
        let bad = CodeConfig { vocab: 4, k: 2, dims: 0, code_dim: 8, lossy: true };
        assert!(bad.validate().is_err());
    }
}
