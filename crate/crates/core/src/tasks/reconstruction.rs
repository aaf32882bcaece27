use crate::diffcore::{GraphBuilder, NodeId, ParamStore, Tensor};
use crate::rng::derived;
use crate::trainer::{Task, Validation};
use crate::{Error, Result};

use super::data::held_out;

/// Reproduce a fixed embedding matrix: loss is the mean over symbols of
/// `‖v_i − u_i‖²`. Every symbol is trained; a seeded subset is scored for
/// checkpoint selection.
#[derive(Clone, Debug)]
pub struct ReconstructionTask {
    target: Tensor,
    validation: Vec<usize>,
}

impl ReconstructionTask {
    pub fn new(target: Tensor, validation_fraction: f64, seed: u64) -> Result<Self> {
        if target.rank() != 2 || !target.is_finite() {
            return Err(Error::invalid("reconstruction target must be a finite N×d matrix"));
        }
        let validation = held_out(target.row_count(), validation_fraction, &mut derived(seed, 7));
        Ok(Self { target, validation })
    }

    pub fn target(&self) -> &Tensor {
        &self.target
    }

    pub fn validation_rows(&self) -> &[usize] {
        &self.validation
    }

    /// Mean squared row error over all symbols.
    pub fn loss(&self, embeddings: &Tensor) -> Result<f64> {
        let rows: Vec<usize> = (0..self.target.row_count()).collect();
        self.loss_on(embeddings, &rows)
    }

    pub fn loss_on(&self, embeddings: &Tensor, rows: &[usize]) -> Result<f64> {
        if embeddings.shape() != self.target.shape() {
            return Err(Error::invalid(format!(
                "embeddings {:?} do not match target {:?}",
                embeddings.shape(),
                self.target.shape()
            )));
        }
        if rows.is_empty() {
            return Err(Error::invalid("no rows to score"));
        }
        let total: f64 = rows
            .iter()
            .map(|&i| embeddings.row(i).iter().zip(self.target.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum();
        Ok(total / rows.len() as f64)
    }
}

impl Task for ReconstructionTask {
    fn vocab(&self) -> usize {
        self.target.row_count()
    }

    fn dim(&self) -> usize {
        self.target.row_len()
    }

    fn train_len(&self) -> usize {
        self.target.row_count()
    }

    fn batch_symbols(&self, examples: &[usize]) -> Vec<usize> {
        let mut s = examples.to_vec();
        s.sort_unstable();
        s.dedup();
        s
    }

    fn loss_node(&self, g: &mut GraphBuilder, emb: NodeId, _examples: &[usize], symbols: &[usize]) -> NodeId {
        let d = self.dim();
        let mut rows = Vec::with_capacity(symbols.len() * d);
        for &s in symbols {
            rows.extend_from_slice(self.target.row(s));
        }
        let t = g.constant(Tensor::new(vec![symbols.len(), d], rows).expect("target rows"));
        let se = g.squared_error(emb, t);
        g.scale(se, 1.0 / symbols.len() as f64)
    }

    fn validate(&self, embeddings: &Tensor, _params: &ParamStore) -> Result<Validation> {
        let rows: Vec<usize> =
            if self.validation.is_empty() { (0..self.target.row_count()).collect() } else { self.validation.clone() };
        Ok(Validation { loss: self.loss_on(embeddings, &rows)?, metric: None })
    }
}
