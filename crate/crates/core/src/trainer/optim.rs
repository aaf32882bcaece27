use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Plain SGD or Adam. Row updates touch only the listed rows (moments of
/// other rows are left as they are), with bias correction from the global
/// step count.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, t: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Advances the global step; call once per batch before the updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, scale: f64) {
        let (rows, width) = if param.rank() == 0 { (1, 1) } else { (param.shape()[0], param.len() / param.shape()[0]) };
        let all: Vec<usize> = (0..rows).collect();
        self.apply(name, param, &all, grad, scale, width);
    }

    /// Updates rows `rows` (along the first axis) of `param` from `grad`,
    /// which holds one gradient slab per listed row.
    pub fn update_rows(&mut self, name: &str, param: &mut Tensor, rows: &[usize], grad: &Tensor, scale: f64) {
        let width = param.len() / param.shape()[0];
        self.apply(name, param, rows, grad, scale, width);
    }

    fn apply(&mut self, name: &str, param: &mut Tensor, rows: &[usize], grad: &Tensor, scale: f64, width: usize) {
        debug_assert_eq!(grad.len(), rows.len() * width);
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                let data = param.data_mut();
                for (slot, &r) in rows.iter().enumerate() {
                    let g = &grad.data()[slot * width..(slot + 1) * width];
                    for (p, &gv) in data[r * width..(r + 1) * width].iter_mut().zip(g) {
                        *p -= lr * scale * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let m = self.first.entry(name.to_string()).or_insert_with(|| param.same_shape_zeros());
                let v = self.second.entry(name.to_string()).or_insert_with(|| param.same_shape_zeros());
                let c1 = 1.0 - BETA1.powf(self.t as f64);
                let c2 = 1.0 - BETA2.powf(self.t as f64);
                let data = param.data_mut();
                for (slot, &r) in rows.iter().enumerate() {
                    let g = &grad.data()[slot * width..(slot + 1) * width];
                    let range = r * width..(r + 1) * width;
                    let (ms, vs) = (&mut m.data_mut()[range.clone()], &mut v.data_mut()[range.clone()]);
                    for (((p, &gv), mv), vv) in data[range].iter_mut().zip(g).zip(ms).zip(vs) {
                        let gv = gv * scale;
                        *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                        *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                        *p -= lr * (*mv / c1) / ((*vv / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    #[test]
    fn sgd_step() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        opt.begin_step();
        opt.update("p", &mut p, &Tensor::vector(vec![1.0, -1.0]), 1.0);
        assert_eq!(p.data(), &[0.9, 2.1]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        opt.begin_step();
        opt.update("p", &mut p, &Tensor::vector(vec![3.0, -0.5]), 1.0);
        assert_abs_diff_eq!(p.data()[0], 0.99, epsilon = 1e-8);
        assert_abs_diff_eq!(p.data()[1], 2.01, epsilon = 1e-8);
    }

    #[test]
    fn row_updates_leave_other_rows() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1);
        let mut p = Tensor::new(vec![3, 2], vec![0.0; 6]).unwrap();
        opt.begin_step();
        opt.update_rows("p", &mut p, &[2, 0], &Tensor::new(vec![2, 2], vec![1.0, 1.0, -1.0, -1.0]).unwrap(), 1.0);
        assert_eq!(&p.data()[2..4], &[0.0, 0.0]);
        assert!(p.data()[4] < 0.0 && p.data()[0] > 0.0);
    }

    #[test]
    fn zero_learning_rate_is_exact() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(kind, 0.0);
            let mut p = Tensor::vector(vec![0.1, -0.3, 7.0]);
            let before = p.clone();
            for _ in 0..3 {
                opt.begin_step();
                opt.update("p", &mut p, &Tensor::vector(vec![5.0, -2.0, 0.5]), 1.0);
            }
            assert_eq!(p, before);
        }
    }
}
