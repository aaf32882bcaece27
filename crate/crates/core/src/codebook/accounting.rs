use serde::{Deserialize, Serialize};

/// Bits stored per code digit: `ceil(log2 K)`, exact when `K` is a power
/// of two.
pub fn digit_bits(k: usize) -> u64 {
    if k <= 1 {
        return 0;
    }
    (usize::BITS - (k - 1).leading_zeros()) as u64
}

/// Bits of the code table alone: `N·D·ceil(log2 K)`.
pub fn code_bits(vocab: usize, k: usize, dims: usize) -> u64 {
    vocab as u64 * dims as u64 * digit_bits(k)
}

/// Embedding parameters of a KD layer: `K·D·d' + C`.
pub fn embedding_params_count(k: usize, dims: usize, code_dim: usize, composer_params: usize) -> u64 {
    (k * dims * code_dim + composer_params) as u64
}

/// Which formula to use for the size of a conventional embedding layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FullBitsConvention {
    /// `32·N·d`, the value tabulated for full embeddings.
    #[default]
    Matrix,
    /// `32·N·(1+d)`.
    WithBias,
}

/// A sized embedding layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum LayerSize {
    Kd { vocab: usize, k: usize, dims: usize, code_dim: usize, composer_params: usize },
    Full { vocab: usize, dim: usize, convention: FullBitsConvention },
    /// Uniformly quantized `N×d` matrix at `bits` per entry.
    Scalar { vocab: usize, dim: usize, bits: u32 },
    /// Two 32-bit factors, `N×r` and `r×d`.
    LowRank { vocab: usize, dim: usize, rank: usize },
}

impl LayerSize {
    pub fn params(&self) -> u64 {
        match *self {
            LayerSize::Kd { k, dims, code_dim, composer_params, .. } => {
                embedding_params_count(k, dims, code_dim, composer_params)
            }
            LayerSize::Full { vocab, dim, .. } | LayerSize::Scalar { vocab, dim, .. } => (vocab * dim) as u64,
            LayerSize::LowRank { vocab, dim, rank } => (rank * (vocab + dim)) as u64,
        }
    }
}

/// Total bits of an embedding layer: codes plus 32-bit parameters.
pub fn embedding_layer_bits(layer: &LayerSize) -> u64 {
    match *layer {
        LayerSize::Kd { vocab, k, dims, code_dim, composer_params } => {
            code_bits(vocab, k, dims) + 32 * embedding_params_count(k, dims, code_dim, composer_params)
        }
        LayerSize::Full { vocab, dim, convention } => {
            let per_row = match convention {
                FullBitsConvention::Matrix => dim,
                FullBitsConvention::WithBias => dim + 1,
            };
            32 * (vocab * per_row) as u64
        }
        LayerSize::Scalar { vocab, dim, bits } => scalar_quantized_bits(vocab, dim, bits),
        LayerSize::LowRank { .. } => 32 * layer.params(),
    }
}

/// Uniformly quantized `N×d` matrix at `bits` per entry plus a 32-bit scale
/// and offset.
pub fn scalar_quantized_bits(vocab: usize, dim: usize, bits: u32) -> u64 {
    (vocab * dim) as u64 * bits as u64 + 64
}
