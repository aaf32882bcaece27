use rand::Rng as _;

use crate::diffcore::{GraphBuilder, Inputs, ParamStore, Tensor};
use crate::rng::seeded;
use crate::trainer::{Optimizer, OptimizerKind};
use crate::{Error, Result};

/// Gradient-descent settings for [`low_rank_fit`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowRankConfig {
    pub max_steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Stop once the mean squared entry error falls below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for LowRankConfig {
    fn default() -> Self {
        Self { max_steps: 6000, lr_start: 0.05, lr_end: 1e-5, tolerance: 1e-9, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowRank {
    /// `N×r`.
    pub a: Tensor,
    /// `r×d`.
    pub b: Tensor,
    /// Mean squared entry error of `A·B` against the target.
    pub error: f64,
    pub steps: usize,
}

impl LowRank {
    pub fn reconstruct(&self) -> Tensor {
        let (n, r, d) = (self.a.shape()[0], self.a.shape()[1], self.b.shape()[1]);
        let mut out = Tensor::zeros(vec![n, d]);
        for i in 0..n {
            for p in 0..r {
                let av = self.a.row(i)[p];
                for (o, &bv) in out.row_mut(i).iter_mut().zip(self.b.row(p)) {
                    *o += av * bv;
                }
            }
        }
        out
    }
}

/// Fits `U ≈ A·B` of rank `r` by full-batch Adam on the squared error, with
/// the learning rate decaying geometrically from `lr_start` to `lr_end`.
pub fn low_rank_fit(u: &Tensor, rank: usize, config: &LowRankConfig) -> Result<LowRank> {
    if u.rank() != 2 {
        return Err(Error::invalid("low-rank fit needs a matrix"));
    }
    let (n, d) = (u.shape()[0], u.shape()[1]);
    if rank == 0 || rank > n.min(d) {
        return Err(Error::invalid(format!("rank must lie in 1..={}, got {rank}", n.min(d))));
    }
    let mut rng = seeded(config.seed);
    let scale = (u.data().iter().map(|x| x * x).sum::<f64>() / u.len() as f64).sqrt().max(1e-3);
    let init = (scale / rank as f64).sqrt();
    let mut params = ParamStore::new();
    let mut random = |shape: Vec<usize>| {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.random_range(-init..init)).collect()).expect("shape")
    };
    params.insert("a", random(vec![n, rank]));
    params.insert("b", random(vec![rank, d]));
    let mut g = GraphBuilder::new();
    let (a, b) = (g.param("a"), g.param("b"));
    let prod = g.matmul(a, b);
    let target = g.constant(u.clone());
    let se = g.squared_error(prod, target);
    let loss = g.scale(se, 1.0 / u.len() as f64);
    let graph = g.build();
    let inputs = Inputs::new();
    let mut error = f64::INFINITY;
    let mut steps = 0;
    let decay = (config.lr_end / config.lr_start).ln() / config.max_steps.max(1) as f64;
    let mut opt = Optimizer::new(OptimizerKind::Adam, config.lr_start);
    for step in 0..config.max_steps {
        let values = graph.evaluate(&params, &inputs)?;
        error = values.scalar(loss);
        if error < config.tolerance {
            break;
        }
        let grads = graph.gradient(&values, loss, &["a", "b"])?;
        drop(values);
        opt.set_learning_rate(config.lr_start * (decay * step as f64).exp());
        opt.begin_step();
        for (name, grad) in &grads {
            opt.update(name, params.get_mut(name).expect("factor"), grad, 1.0);
        }
        steps = step + 1;
    }
    let values = graph.evaluate(&params, &inputs)?;
    error = error.min(values.scalar(loss));
    drop(values);
    Ok(LowRank { a: params.remove("a").expect("a"), b: params.remove("b").expect("b"), error, steps })
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn gaussian(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        Tensor::new(vec![n, d], (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn rank_one_target_is_recovered() {
        let (x, y) = (gaussian(30, 1, 1), gaussian(1, 12, 2));
        let mut u = Tensor::zeros(vec![30, 12]);
        for i in 0..30 {
            for j in 0..12 {
                u.row_mut(i)[j] = x.data()[i] * y.data()[j];
            }
        }
        let fit = low_rank_fit(&u, 1, &LowRankConfig::default()).unwrap();
        assert!(fit.error < 1e-6, "{}", fit.error);
    }

    #[test]
    fn full_rank_is_exact() {
        let u = gaussian(15, 6, 3);
        let fit = low_rank_fit(&u, 6, &LowRankConfig::default()).unwrap();
        assert!(fit.error < 1e-6, "{}", fit.error);
    }

    #[test]
    fn more_rank_never_hurts() {
        let u = gaussian(50, 20, 4);
        let e5 = low_rank_fit(&u, 5, &LowRankConfig::default()).unwrap().error;
        let e10 = low_rank_fit(&u, 10, &LowRankConfig::default()).unwrap().error;
        assert!(e10 <= e5, "{e10} > {e5}");
        assert!(low_rank_fit(&u, 21, &LowRankConfig::default()).is_err());
    }
}
