use rand_distr::{Distribution, Normal};

use crate::diffcore::{argmax, softmax_rows, GraphBuilder, NodeId, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

/// Floor applied inside the logarithm of the entropy term.
pub const ENTROPY_FLOOR: f64 = 1e-12;

/// Row-wise `softmax(logits / tau)` over the last axis.
pub fn tempering_softmax(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if !logits.is_finite() {
        return Err(Error::invalid("logits must be finite"));
    }
    Ok(softmax_rows(logits, tau))
}

/// Forward value of the straight-through node: the one-hot of each row's
/// argmax, lowest index on ties.
pub fn straight_through(relaxed: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(relaxed.shape().to_vec());
    for r in 0..relaxed.row_count() {
        let k = argmax(relaxed.row(r));
        out.row_mut(r)[k] = 1.0;
    }
    out
}

/// `-Σ p·ln p` summed over every row, with `0·ln 0 = 0`.
pub fn entropy_regularizer(relaxed: &Tensor) -> Result<f64> {
    if let Some(&bad) = relaxed.data().iter().find(|&&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::invalid(format!("probabilities must be non-negative, found {bad}")));
    }
    Ok(-relaxed.data().iter().map(|&p| p * p.max(ENTROPY_FLOOR).ln()).sum::<f64>())
}

/// Graph form of [`entropy_regularizer`].
pub fn entropy_node(g: &mut GraphBuilder, relaxed: NodeId) -> NodeId {
    let log = g.log(relaxed, ENTROPY_FLOOR);
    let plogp = g.mul(relaxed, log);
    let total = g.sum(plogp);
    g.scale(total, -1.0)
}

/// Code logits `N×D×K` drawn i.i.d. from `N(0, std²)`.
pub fn init_logits(vocab: usize, dims: usize, k: usize, std: f64, rng: &mut Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let data = (0..vocab * dims * k).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![vocab, dims, k], data).expect("consistent shape")
}
