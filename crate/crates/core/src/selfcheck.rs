//! Finite-difference verification of every differentiable building block:
//! graph ops, composers, the entropy regularizer and the guidance losses.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::codebook::entropy_node;
use crate::composer::{CodeBook, ComposerKind, ComposerSpec, Selection};
use crate::diffcore::{finite_difference_check, GraphBuilder, Inputs, NodeId, ParamStore, Tensor};
use crate::guidance::{autoencoder_node, distillation_node, odg_mix_node, odg_regularizer_node, Encoder, EncoderSpec};
use crate::rng::{derived, Rng};
use crate::Result;

/// Worst relative error of one component over all its instances and
/// parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: u64,
    pub worst: f64,
}

/// Runs `instances` random instances of every case and reports the largest
/// relative error per case.
pub fn gradient_suite(instances: u64, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (idx, (name, (case, eps))) in cases().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for instance in 0..instances {
            let mut rng = derived(seed.wrapping_add(idx as u64 * 1000), instance);
            let (g, loss, params, names) = case(&mut rng);
            let graph = g.build();
            let inputs = Inputs::new();
            for param in names {
                worst = worst.max(finite_difference_check(&graph, &params, &inputs, loss, param, eps)?);
            }
        }
        out.push(CheckResult { name, instances, worst });
    }
    Ok(out)
}

fn random(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Magnitudes in [0.2, 1.5) with random sign, so relu and log stay
/// differentiable under probing.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape, 0.2, 1.5);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Reduces a tensor node to a scalar by a fixed random weighting so every
/// output entry contributes a distinct gradient.
fn weighted_sum(g: &mut GraphBuilder, rng: &mut Rng, x: NodeId, shape: &[usize]) -> NodeId {
    let w = g.constant(random(rng, shape, -1.0, 1.0));
    let prod = g.mul(x, w);
    g.sum(prod)
}

type Case = fn(&mut Rng) -> (GraphBuilder, NodeId, ParamStore, Vec<&'static str>);

/// Ops are probed with step 1e-6; composite losses with 1e-5, where
/// rounding noise on small gradients would otherwise dominate.
const OP_EPS: f64 = 1e-6;
const LOSS_EPS: f64 = 1e-5;

fn one_param(name: &'static str, t: Tensor) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert(name, t);
    p
}

fn op_cases() -> BTreeMap<&'static str, Case> {
    let mut m: BTreeMap<&'static str, Case> = BTreeMap::new();
    m.insert("matmul", |rng| {
        let mut g = GraphBuilder::new();
        let (a, b) = (g.param("a"), g.param("b"));
        let c = g.matmul(a, b);
        let loss = weighted_sum(&mut g, rng, c, &[3, 2]);
        let mut p = one_param("a", random(rng, &[3, 4], -1.0, 1.0));
        p.insert("b", random(rng, &[4, 2], -1.0, 1.0));
        (g, loss, p, vec!["a", "b"])
    });
    m.insert("add", |rng| {
        let mut g = GraphBuilder::new();
        let (a, b, c) = (g.param("a"), g.param("b"), g.param("c"));
        let s = g.add(a, b);
        let s = g.add(s, c);
        let loss = weighted_sum(&mut g, rng, s, &[3, 4]);
        let mut p = one_param("a", random(rng, &[3, 4], -1.0, 1.0));
        p.insert("b", random(rng, &[3, 4], -1.0, 1.0));
        p.insert("c", random(rng, &[4], -1.0, 1.0));
        (g, loss, p, vec!["a", "b", "c"])
    });
    m.insert("subtract", |rng| {
        let mut g = GraphBuilder::new();
        let (a, b, c) = (g.param("a"), g.param("b"), g.param("c"));
        let s = g.sub(a, b);
        let s = g.sub(s, c);
        let loss = weighted_sum(&mut g, rng, s, &[2, 5]);
        let mut p = one_param("a", random(rng, &[2, 5], -1.0, 1.0));
        p.insert("b", random(rng, &[2, 5], -1.0, 1.0));
        p.insert("c", random(rng, &[5], -1.0, 1.0));
        (g, loss, p, vec!["a", "b", "c"])
    });
    m.insert("multiply", |rng| {
        let mut g = GraphBuilder::new();
        let (a, b) = (g.param("a"), g.param("b"));
        let s = g.mul(a, b);
        let loss = weighted_sum(&mut g, rng, s, &[3, 3]);
        let mut p = one_param("a", random(rng, &[3, 3], -1.0, 1.0));
        p.insert("b", random(rng, &[3, 3], -1.0, 1.0));
        (g, loss, p, vec!["a", "b"])
    });
    m.insert("scale", |rng| {
        let mut g = GraphBuilder::new();
        let a = g.param("a");
        let f = rng.random_range(-3.0..3.0);
        let s = g.scale(a, f);
        let loss = weighted_sum(&mut g, rng, s, &[4]);
        (g, loss, one_param("a", random(rng, &[4], -1.0, 1.0)), vec!["a"])
    });
    m.insert("gather", |rng| {
        let mut g = GraphBuilder::new();
        let t = g.param("t");
        let rows: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
        let s = g.gather(t, rows);
        let loss = weighted_sum(&mut g, rng, s, &[6, 3]);
        (g, loss, one_param("t", random(rng, &[4, 3], -1.0, 1.0)), vec!["t"])
    });
    m.insert("softmax", |rng| {
        let mut g = GraphBuilder::new();
        let x = g.param("x");
        let tau = rng.random_range(0.3..2.0);
        let s = g.softmax(x, tau);
        let loss = weighted_sum(&mut g, rng, s, &[3, 5]);
        (g, loss, one_param("x", random(rng, &[3, 5], -2.0, 2.0)), vec!["x"])
    });
    m.insert("sigmoid", |rng| {
        let mut g = GraphBuilder::new();
        let x = g.param("x");
        let s = g.sigmoid(x);
        let loss = weighted_sum(&mut g, rng, s, &[2, 3]);
        (g, loss, one_param("x", random(rng, &[2, 3], -3.0, 3.0)), vec!["x"])
    });
    m.insert("tanh", |rng| {
        let mut g = GraphBuilder::new();
        let x = g.param("x");
        let s = g.tanh(x);
        let loss = weighted_sum(&mut g, rng, s, &[2, 3]);
        (g, loss, one_param("x", random(rng, &[2, 3], -2.0, 2.0)), vec!["x"])
    });
    m.insert("relu", |rng| {
        let mut g = GraphBuilder::new();
        let x = g.param("x");
        let s = g.relu(x);
        let loss = weighted_sum(&mut g, rng, s, &[3, 3]);
        (g, loss, one_param("x", away_from_zero(rng, &[3, 3])), vec!["x"])
    });
    m.insert("sum", |rng| {
        let mut g = GraphBuilder::new();
        let x = g.param("x");
        let sq = g.mul(x, x);
        let loss = g.sum(sq);
        (g, loss, one_param("x", away_from_zero(rng, &[2, 4])), vec!["x"])
    });
    m.insert("mean", |rng| {
        let mut g = GraphBuilder::new();
        let x = g.param("x");
        let sq = g.mul(x, x);
        let loss = g.mean(sq);
        (g, loss, one_param("x", away_from_zero(rng, &[2, 4])), vec!["x"])
    });
    m.insert("squared-error", |rng| {
        let mut g = GraphBuilder::new();
        let (a, b) = (g.param("a"), g.param("b"));
        let loss = g.squared_error(a, b);
        let mut p = one_param("a", random(rng, &[3, 2], -1.0, 1.0));
        p.insert("b", random(rng, &[3, 2], 2.0, 3.0));
        (g, loss, p, vec!["a", "b"])
    });
    m.insert("softmax-cross-entropy", |rng| {
        let mut g = GraphBuilder::new();
        let z = g.param("z");
        let mut targets = random(rng, &[4, 5], 0.0, 1.0);
        for r in 0..4 {
            let s: f64 = targets.row(r).iter().sum();
            targets.row_mut(r).iter_mut().for_each(|v| *v /= s);
        }
        let t = g.constant(targets);
        let loss = g.softmax_cross_entropy(z, t);
        (g, loss, one_param("z", random(rng, &[4, 5], -2.0, 2.0)), vec!["z"])
    });
    m.insert("concatenate", |rng| {
        let mut g = GraphBuilder::new();
        let (a, b) = (g.param("a"), g.param("b"));
        let c = g.concat(&[a, b, a]);
        let loss = weighted_sum(&mut g, rng, c, &[2, 7]);
        let mut p = one_param("a", random(rng, &[2, 2], -1.0, 1.0));
        p.insert("b", random(rng, &[2, 3], -1.0, 1.0));
        (g, loss, p, vec!["a", "b"])
    });
    m.insert("reshape", |rng| {
        let mut g = GraphBuilder::new();
        let x = g.param("x");
        let r = g.reshape(x, &[3, 4]);
        let loss = weighted_sum(&mut g, rng, r, &[3, 4]);
        (g, loss, one_param("x", random(rng, &[2, 3, 2], -1.0, 1.0)), vec!["x"])
    });
    m.insert("log", |rng| {
        let mut g = GraphBuilder::new();
        let x = g.param("x");
        let l = g.log(x, 1e-12);
        let loss = weighted_sum(&mut g, rng, l, &[5]);
        (g, loss, one_param("x", random(rng, &[5], 0.2, 3.0)), vec!["x"])
    });
    m.insert("slice-last", |rng| {
        let mut g = GraphBuilder::new();
        let x = g.param("x");
        let s = g.slice_last(x, 1, 3);
        let loss = weighted_sum(&mut g, rng, s, &[2, 3]);
        (g, loss, one_param("x", random(rng, &[2, 5], -1.0, 1.0)), vec!["x"])
    });
    m
}

fn composer_case(rng: &mut Rng, kind: ComposerKind) -> (GraphBuilder, NodeId, ParamStore, Vec<&'static str>) {
    let (k, dims, code_dim, out_dim, batch) = (3, 3, 4, 5, 2);
    let spec = ComposerSpec { kind, k, dims, code_dim, out_dim };
    let mut store = ParamStore::new();
    CodeBook::init(spec, rng).expect("valid spec").install(&mut store);
    randomize_biases(rng, &mut store);
    store.insert("pi", random(rng, &[batch, dims, k], -1.0, 1.0));
    let mut g = GraphBuilder::new();
    let pi = g.param("pi");
    let tau = rng.random_range(0.5..1.5);
    let probs = g.softmax(pi, tau);
    let rows = spec.split_selection(&mut g, probs, batch);
    let v = spec.compose_node(&mut g, &Selection::Relaxed(rows));
    let loss = weighted_sum(&mut g, rng, v, &[batch, out_dim]);
    let names = leak_names(&store);
    (g, loss, store, names)
}

/// Zero-initialized biases would make their gradients degenerate.
fn randomize_biases(rng: &mut Rng, store: &mut ParamStore) {
    for (name, t) in store.iter_mut() {
        if name.contains(".b") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
}

fn leak_names(store: &ParamStore) -> Vec<&'static str> {
    store.names().map(|n| &*Box::leak(n.to_string().into_boxed_str())).collect()
}

fn guidance_setup(rng: &mut Rng, kind: ComposerKind) -> (ComposerSpec, EncoderSpec, ParamStore, Tensor, f64) {
    let (k, dims, d, batch) = (3, 2, 4, 3);
    let cspec = ComposerSpec { kind, k, dims, code_dim: 3, out_dim: d };
    let espec = EncoderSpec { in_dim: d, hidden: 5, dims, k };
    let mut store = ParamStore::new();
    CodeBook::init(cspec, rng).expect("valid spec").install(&mut store);
    Encoder::init(espec, rng).expect("valid spec").install(&mut store);
    randomize_biases(rng, &mut store);
    store.insert("pi", random(rng, &[batch, dims, k], -1.0, 1.0));
    let u = random(rng, &[batch, d], -1.0, 1.0);
    (cspec, espec, store, u, rng.random_range(0.5..1.5))
}

const GUIDED_KINDS: [ComposerKind; 3] =
    [ComposerKind::LinearSum, ComposerKind::LinearHidden { width: 4 }, ComposerKind::Lstm { literal_gates: false }];

fn cases() -> BTreeMap<&'static str, (Case, f64)> {
    let mut m: BTreeMap<&'static str, (Case, f64)> = op_cases().into_iter().map(|(k, v)| (k, (v, OP_EPS))).collect();
    m.insert("composer linear-sum", (|rng| composer_case(rng, ComposerKind::LinearSum), OP_EPS));
    m.insert("composer linear-hidden", (|rng| composer_case(rng, ComposerKind::LinearHidden { width: 6 }), OP_EPS));
    m.insert("composer lstm", (|rng| composer_case(rng, ComposerKind::Lstm { literal_gates: false }), LOSS_EPS));
    m.insert("composer lstm literal-gates", (|rng| composer_case(rng, ComposerKind::Lstm { literal_gates: true }), LOSS_EPS));
    m.insert(
        "entropy regularizer",
        (
            |rng| {
                let mut g = GraphBuilder::new();
                let pi = g.param("pi");
                let tau = rng.random_range(0.5..1.5);
                let probs = g.softmax(pi, tau);
                let loss = entropy_node(&mut g, probs);
                (g, loss, one_param("pi", random(rng, &[3, 2, 4], -2.0, 2.0)), vec!["pi"])
            },
            OP_EPS,
        ),
    );
    m.insert(
        "odg regularizer",
        (
            |rng| {
                let mut g = GraphBuilder::new();
                let (u, fc) = (g.param("u"), g.param("fc"));
                let mask = Tensor::new(vec![3, 4], (0..12).map(|_| f64::from(u8::from(rng.random_bool(0.7)))).collect()).expect("shape");
                let mixed = odg_mix_node(&mut g, u, fc, mask);
                let task = weighted_sum(&mut g, rng, mixed, &[3, 4]);
                let reg = odg_regularizer_node(&mut g, u, fc, rng.random_range(0.1..2.0));
                let loss = g.add(task, reg);
                let mut p = one_param("u", random(rng, &[3, 4], -1.0, 1.0));
                p.insert("fc", random(rng, &[3, 4], -1.0, 1.0));
                // The tether reaches `u` only through a stop-gradient.
                (g, loss, p, vec!["fc"])
            },
            OP_EPS,
        ),
    );
    m.insert(
        "odg mix",
        (
            |rng| {
                let mut g = GraphBuilder::new();
                let (u, fc) = (g.param("u"), g.param("fc"));
                let mask = Tensor::new(vec![3, 4], (0..12).map(|_| f64::from(u8::from(rng.random_bool(0.7)))).collect()).expect("shape");
                let mixed = odg_mix_node(&mut g, u, fc, mask);
                let loss = weighted_sum(&mut g, rng, mixed, &[3, 4]);
                let mut p = one_param("u", random(rng, &[3, 4], -1.0, 1.0));
                p.insert("fc", random(rng, &[3, 4], -1.0, 1.0));
                (g, loss, p, vec!["u", "fc"])
            },
            OP_EPS,
        ),
    );
    m.insert(
        "autoencoder loss",
        (
            |rng| {
                let kind = GUIDED_KINDS[rng.random_range(0..3)];
                let (cspec, espec, mut store, u, tau) = guidance_setup(rng, kind);
                store.remove("pi");
                let batch = u.row_count();
                let mut g = GraphBuilder::new();
                let un = g.constant(u);
                let loss = autoencoder_node(&mut g, &espec, &cspec, un, batch, tau);
                let names = leak_names(&store);
                (g, loss, store, names)
            },
            LOSS_EPS,
        ),
    );
    m.insert(
        "distillation loss",
        (
            |rng| {
                let kind = GUIDED_KINDS[rng.random_range(0..3)];
                let (cspec, espec, store, u, tau) = guidance_setup(rng, kind);
                let batch = u.row_count();
                let (alpha, beta) = (rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
                let mut g = GraphBuilder::new();
                let un = g.constant(u);
                let pi = g.param("pi");
                let enc = espec.logits_node(&mut g, un, batch);
                let loss = distillation_node(&mut g, &cspec, pi, un, Some(enc), batch, tau, alpha, beta);
                let names = leak_names(&store);
                (g, loss, store, names)
            },
            LOSS_EPS,
        ),
    );
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = gradient_suite(20, 0).unwrap();
        assert!(results.len() >= 26);
        for r in results {
            assert!(r.worst < 1e-4, "{}: {}", r.name, r.worst);
        }
    }
}
