//! Code composition: turns a code (one one-hot or relaxed `K`-vector per
//! digit) into a symbol embedding.

mod factorization;
mod io;

pub use factorization::{best_linear_sum_error, binary_code_matrix, factorization_equivalence_check, numerical_rank, stacked_code_embeddings};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codebook::DiscreteCodeTable;
use crate::diffcore::{GraphBuilder, Inputs, NodeId, ParamStore, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ComposerKind {
    /// Sum of the selected code embeddings, projected when `d ≠ d'`.
    LinearSum,
    /// Sum, then one rectified hidden layer of `width` units, then a
    /// projection to `d`.
    LinearHidden { width: usize },
    /// LSTM over the `D` code embeddings (hidden width `d'`); hidden states
    /// are summed and projected when `d ≠ d'`. `literal_gates` ties the
    /// output gate to the forget-gate weights.
    Lstm { literal_gates: bool },
}

impl ComposerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            ComposerKind::LinearSum => "linear-sum",
            ComposerKind::LinearHidden { .. } => "linear-hidden",
            ComposerKind::Lstm { .. } => "lstm",
        }
    }
}

/// Shapes of a composer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposerSpec {
    pub kind: ComposerKind,
    pub k: usize,
    pub dims: usize,
    pub code_dim: usize,
    /// Output embedding width `d`.
    pub out_dim: usize,
}

pub const LSTM_GATES: [&str; 4] = ["forget", "input", "output", "cell"];

impl ComposerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.dims == 0 || self.code_dim == 0 || self.out_dim == 0 {
            return Err(Error::invalid(format!("degenerate composer shape {self:?}")));
        }
        if let ComposerKind::LinearHidden { width: 0 } = self.kind {
            return Err(Error::invalid("hidden width must be positive"));
        }
        Ok(())
    }

    pub fn has_projection(&self) -> bool {
        match self.kind {
            ComposerKind::LinearHidden { .. } => true,
            _ => self.out_dim != self.code_dim,
        }
    }

    pub fn code_emb_name(j: usize) -> String {
        format!("code_emb.{j}")
    }

    /// Every parameter with its shape, in export order: code embeddings,
    /// projection, then composer-specific parameters.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> =
            (0..self.dims).map(|j| (Self::code_emb_name(j), vec![self.k, self.code_dim])).collect();
        if self.has_projection() {
            let rows = match self.kind {
                ComposerKind::LinearHidden { width } => width,
                _ => self.code_dim,
            };
            out.push(("proj".into(), vec![rows, self.out_dim]));
        }
        match self.kind {
            ComposerKind::LinearSum => {}
            ComposerKind::LinearHidden { width } => {
                out.push(("hidden.w".into(), vec![self.code_dim, width]));
                out.push(("hidden.b".into(), vec![width]));
            }
            ComposerKind::Lstm { literal_gates } => {
                let gates = LSTM_GATES.iter().filter(|g| !(literal_gates && **g == "output"));
                for g in gates.clone() {
                    out.push((format!("lstm.u_{g}"), vec![self.code_dim, self.code_dim]));
                }
                for g in gates {
                    out.push((format!("lstm.b_{g}"), vec![self.code_dim]));
                }
            }
        }
        out
    }

    /// Composer parameters `C` beyond the code embeddings (projection
    /// included).
    pub fn composer_params(&self) -> usize {
        self.param_shapes()
            .iter()
            .filter(|(n, _)| !n.starts_with("code_emb."))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Records the composition of `selection` into `g`; returns the
    /// `B×d` embedding node.
    pub fn compose_node(&self, g: &mut GraphBuilder, selection: &Selection) -> NodeId {
        let inputs: Vec<NodeId> = (0..self.dims)
            .map(|j| {
                let table = g.param(&Self::code_emb_name(j));
                match selection {
                    Selection::Relaxed(rows) => g.matmul(rows[j], table),
                    Selection::Hard(cols) => g.gather(table, cols[j].clone()),
                }
            })
            .collect();
        let summed = match self.kind {
            ComposerKind::LinearSum => sum_nodes(g, &inputs),
            ComposerKind::LinearHidden { .. } => {
                let s = sum_nodes(g, &inputs);
                let w = g.param("hidden.w");
                let b = g.param("hidden.b");
                let pre = g.matmul(s, w);
                let pre = g.add(pre, b);
                g.relu(pre)
            }
            ComposerKind::Lstm { literal_gates } => lstm_nodes(g, &inputs, literal_gates),
        };
        if self.has_projection() {
            let p = g.param("proj");
            g.matmul(summed, p)
        } else {
            summed
        }
    }

    /// Per-digit selection rows from a `B×D×K` tensor node.
    pub fn split_selection(&self, g: &mut GraphBuilder, node: NodeId, batch: usize) -> Vec<NodeId> {
        let flat = g.reshape(node, &[batch, self.dims * self.k]);
        (0..self.dims).map(|j| g.slice_last(flat, j * self.k, self.k)).collect()
    }
}

fn sum_nodes(g: &mut GraphBuilder, nodes: &[NodeId]) -> NodeId {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n);
    }
    acc
}

fn lstm_nodes(g: &mut GraphBuilder, inputs: &[NodeId], literal_gates: bool) -> NodeId {
    let gate = |g: &mut GraphBuilder, name: &str, x: NodeId, h: Option<NodeId>| {
        let name = if literal_gates && name == "output" { "forget" } else { name };
        let b = g.param(&format!("lstm.b_{name}"));
        let mut pre = g.add(x, b);
        if let Some(h) = h {
            let u = g.param(&format!("lstm.u_{name}"));
            let rec = g.matmul(h, u);
            pre = g.add(pre, rec);
        }
        pre
    };
    let mut h: Option<NodeId> = None;
    let mut m: Option<NodeId> = None;
    let mut total: Option<NodeId> = None;
    for &x in inputs {
        let f_pre = gate(g, "forget", x, h);
        let forget = g.sigmoid(f_pre);
        let i_pre = gate(g, "input", x, h);
        let input = g.sigmoid(i_pre);
        let o_pre = gate(g, "output", x, h);
        let output = g.sigmoid(o_pre);
        let c_pre = gate(g, "cell", x, h);
        let cand = g.tanh(c_pre);
        let written = g.mul(input, cand);
        let mem = match m {
            Some(prev) => {
                let kept = g.mul(forget, prev);
                g.add(kept, written)
            }
            None => written,
        };
        let squashed = g.tanh(mem);
        let hidden = g.mul(output, squashed);
        total = Some(match total {
            Some(t) => g.add(t, hidden),
            None => hidden,
        });
        h = Some(hidden);
        m = Some(mem);
    }
    total.expect("at least one code dimension")
}

/// How each digit of a batch of codes is selected.
pub enum Selection {
    /// One `B×K` node per digit (relaxed or one-hot rows) multiplied into
    /// the code embeddings.
    Relaxed(Vec<NodeId>),
    /// Digit columns: `cols[j][b]` is digit `j` of batch item `b`, looked up
    /// by row gather.
    Hard(Vec<Vec<usize>>),
}

/// Code embeddings plus composer parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeBook {
    spec: ComposerSpec,
    params: ParamStore,
}

impl CodeBook {
    /// Weights uniform in `±1/sqrt(d')`, biases zero.
    pub fn init(spec: ComposerSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let bound = 1.0 / (spec.code_dim as f64).sqrt();
        let mut params = ParamStore::new();
        for (name, shape) in spec.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.contains(".b") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { spec, params })
    }

    /// Builds a codebook from explicit tensors; every parameter of `spec`
    /// must be present with the right shape.
    pub fn from_params(spec: ComposerSpec, source: &ParamStore) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in spec.param_shapes() {
            let t = source
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("codebook parameter `{name}` missing")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "codebook parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::invalid(format!("codebook parameter `{name}` is not finite")));
            }
            params.insert(name, t.clone());
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ComposerSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn code_embedding(&self, j: usize) -> &Tensor {
        self.params.get(&ComposerSpec::code_emb_name(j)).expect("validated codebook")
    }

    /// Copies every codebook tensor into `store`.
    pub fn install(&self, store: &mut ParamStore) {
        for (name, t) in self.params.iter() {
            store.insert(name, t.clone());
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.names().map(str::to_string).collect()
    }

    /// Embedding of one code given as `D` selection rows of length `K`
    /// (`D×K` tensor). Rows must be non-negative and sum to one.
    pub fn compose(&self, selection: &Tensor) -> Result<Vec<f64>> {
        let spec = &self.spec;
        if selection.shape() != [spec.dims, spec.k] {
            return Err(Error::invalid(format!(
                "selection must be {}×{}, got {:?}",
                spec.dims,
                spec.k,
                selection.shape()
            )));
        }
        for (j, row) in selection.rows().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&x| x < 0.0) {
                return Err(Error::invalid(format!(
                    "selection row {j} is not a probability vector (sum {s})"
                )));
            }
        }
        let mut g = GraphBuilder::new();
        let rows: Vec<NodeId> = selection
            .rows()
            .map(|r| g.constant(Tensor::new(vec![1, spec.k], r.to_vec()).expect("row")))
            .collect();
        let out = spec.compose_node(&mut g, &Selection::Relaxed(rows));
        let graph = g.build();
        let inputs = Inputs::new();
        let values = graph.evaluate(&self.params, &inputs)?;
        Ok(values.get(out).data().to_vec())
    }

    /// Embedding matrix (`N×d`) of every code in `table`, by row lookup.
    pub fn compose_batch(&self, table: &DiscreteCodeTable) -> Result<Tensor> {
        let rows: Vec<usize> = (0..table.len()).collect();
        self.compose_rows(table, &rows)
    }

    /// Embeddings of the listed symbols of `table`.
    pub fn compose_rows(&self, table: &DiscreteCodeTable, rows: &[usize]) -> Result<Tensor> {
        let spec = &self.spec;
        if table.k() != spec.k || table.dims() != spec.dims {
            return Err(Error::invalid(format!(
                "table is K={} D={}, codebook is K={} D={}",
                table.k(),
                table.dims(),
                spec.k,
                spec.dims
            )));
        }
        if rows.is_empty() {
            return Err(Error::invalid("no symbols to compose"));
        }
        let cols = (0..spec.dims).map(|j| table.column(j, rows)).collect();
        let mut g = GraphBuilder::new();
        let out = spec.compose_node(&mut g, &Selection::Hard(cols));
        let graph = g.build();
        let inputs = Inputs::new();
        let values = graph.evaluate(&self.params, &inputs)?;
        Ok(values.get(out).clone())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, io::encode(self)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        io::decode(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        io::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        io::decode(bytes)
    }

    /// Copy with every value rounded through `f32`, as stored on export.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.params.iter_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::diffcore::finite_difference_check;
    use crate::rng::seeded;

    fn spec(kind: ComposerKind, k: usize, dims: usize, code_dim: usize, out_dim: usize) -> ComposerSpec {
        ComposerSpec { kind, k, dims, code_dim, out_dim }
    }

    fn one_hot_rows(code: &[usize], k: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![code.len(), k]);
        for (j, &c) in code.iter().enumerate() {
            t.row_mut(j)[c] = 1.0;
        }
        t
    }

    fn all_kinds() -> [ComposerKind; 4] {
        [
            ComposerKind::LinearSum,
            ComposerKind::LinearHidden { width: 6 },
            ComposerKind::Lstm { literal_gates: false },
            ComposerKind::Lstm { literal_gates: true },
        ]
    }

    #[test]
    fn single_digit_selects_a_row() {
        let book = CodeBook::init(spec(ComposerKind::LinearSum, 4, 1, 3, 3), &mut seeded(0)).unwrap();
        let v = book.compose(&one_hot_rows(&[2], 4)).unwrap();
        assert_eq!(v, book.code_embedding(0).row(2));
    }

    #[test]
    fn hand_computed_sum() {
        let s = spec(ComposerKind::LinearSum, 2, 2, 2, 2);
        let mut store = ParamStore::new();
        store.insert("code_emb.0", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        store.insert("code_emb.1", Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 3.0]]).unwrap());
        let book = CodeBook::from_params(s, &store).unwrap();
        assert_eq!(book.compose(&one_hot_rows(&[0, 1], 2)).unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn zero_parameters_compose_to_zero() {
        for kind in all_kinds() {
            let mut book = CodeBook::init(spec(kind, 3, 3, 4, 5), &mut seeded(1)).unwrap();
            for (_, t) in book.params_mut().iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            let v = book.compose(&one_hot_rows(&[0, 2, 1], 3)).unwrap();
            assert!(v.iter().all(|&x| x == 0.0), "{kind:?}: {v:?}");
        }
    }

    #[test]
    fn rejects_invalid_selection_rows() {
        let book = CodeBook::init(spec(ComposerKind::LinearSum, 3, 2, 2, 2), &mut seeded(2)).unwrap();
        let bad = Tensor::from_rows(&[vec![0.5, 0.4, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(book.compose(&bad).is_err());
        assert!(book.compose(&Tensor::zeros(vec![3, 3])).is_err());
        let relaxed = Tensor::from_rows(&[vec![0.5, 0.25, 0.25], vec![0.1, 0.8, 0.1]]).unwrap();
        book.compose(&relaxed).unwrap();
    }

    #[test]
    fn gather_and_one_hot_product_agree_exactly() {
        for kind in all_kinds() {
            let s = spec(kind, 5, 3, 4, 6);
            let book = CodeBook::init(s, &mut seeded(4)).unwrap();
            let digits = vec![4, 0, 2, 1, 1, 3, 0, 0, 0];
            let table = DiscreteCodeTable::anonymous(5, 3, digits).unwrap();
            let batch = book.compose_batch(&table).unwrap();
            for i in 0..table.len() {
                let code: Vec<usize> = table.code(i).iter().map(|&d| d as usize).collect();
                let single = book.compose(&one_hot_rows(&code, 5)).unwrap();
                assert_eq!(single.as_slice(), batch.row(i), "{kind:?}");
            }
        }
    }

    #[test]
    fn batch_matches_independent_calls() {
        let mut rng = seeded(8);
        let s = spec(ComposerKind::LinearHidden { width: 7 }, 4, 3, 5, 6);
        let book = CodeBook::init(s, &mut rng).unwrap();
        let digits: Vec<u32> = (0..60).map(|_| rng.random_range(0..4)).collect();
        let table = DiscreteCodeTable::anonymous(4, 3, digits).unwrap();
        let batch = book.compose_batch(&table).unwrap();
        for i in 0..20 {
            let code: Vec<usize> = table.code(i).iter().map(|&d| d as usize).collect();
            let v = book.compose(&one_hot_rows(&code, 4)).unwrap();
            assert_eq!(v.as_slice(), batch.row(i));
        }
    }

    #[test]
    fn identical_codes_give_identical_rows() {
        let book = CodeBook::init(spec(ComposerKind::Lstm { literal_gates: false }, 3, 2, 4, 4), &mut seeded(5)).unwrap();
        let table = DiscreteCodeTable::anonymous(3, 2, vec![1, 2, 0, 0, 1, 2]).unwrap();
        let e = book.compose_batch(&table).unwrap();
        assert_eq!(e.row(0), e.row(2));
    }

    #[test]
    fn lstm_matches_hand_rolled_recurrence() {
        let s = spec(ComposerKind::Lstm { literal_gates: false }, 3, 3, 2, 2);
        let book = CodeBook::init(s, &mut seeded(6)).unwrap();
        let p = book.params();
        let code = [2usize, 0, 1];
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let (mut h, mut m, mut total) = ([0.0; 2], [0.0; 2], [0.0; 2]);
        for (j, &c) in code.iter().enumerate() {
            let x = p.get(&format!("code_emb.{j}")).unwrap().row(c).to_vec();
            let pre = |gate: &str| -> [f64; 2] {
                let u = p.get(&format!("lstm.u_{gate}")).unwrap();
                let b = p.get(&format!("lstm.b_{gate}")).unwrap();
                let mut out = [0.0; 2];
                for col in 0..2 {
                    out[col] = x[col] + b.data()[col] + h[0] * u.row(0)[col] + h[1] * u.row(1)[col];
                }
                out
            };
            let (f, i, o, c_) = (pre("forget"), pre("input"), pre("output"), pre("cell"));
            for col in 0..2 {
                m[col] = sig(f[col]) * m[col] + sig(i[col]) * c_[col].tanh();
            }
            for col in 0..2 {
                h[col] = sig(o[col]) * m[col].tanh();
                total[col] += h[col];
            }
        }
        let v = book.compose(&one_hot_rows(&code, 3)).unwrap();
        assert_abs_diff_eq!(v[0], total[0], epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], total[1], epsilon = 1e-12);
    }

    #[test]
    fn composer_parameter_counts() {
        assert_eq!(spec(ComposerKind::LinearSum, 4, 2, 8, 8).composer_params(), 0);
        assert_eq!(spec(ComposerKind::LinearSum, 4, 2, 8, 5).composer_params(), 40);
        assert_eq!(spec(ComposerKind::LinearHidden { width: 300 }, 32, 32, 300, 650).composer_params(), 300 * 300 + 300 + 300 * 650);
        assert_eq!(spec(ComposerKind::Lstm { literal_gates: false }, 4, 2, 8, 8).composer_params(), 4 * 64 + 4 * 8);
        assert_eq!(spec(ComposerKind::Lstm { literal_gates: true }, 4, 2, 8, 8).composer_params(), 3 * 64 + 3 * 8);
    }

    #[test]
    fn every_composer_parameter_passes_gradient_check() {
        let mut rng = seeded(12);
        for kind in all_kinds() {
            let s = spec(kind, 3, 3, 4, 5);
            let book = CodeBook::init(s, &mut rng).unwrap();
            let mut store = ParamStore::new();
            book.install(&mut store);
            let logits: Vec<f64> = (0..2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
            store.insert("pi", Tensor::new(vec![2, 3, 3], logits).unwrap());
            let target = Tensor::new(vec![2, 5], (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let mut g = GraphBuilder::new();
            let pi = g.param("pi");
            let probs = g.softmax(pi, 0.8);
            let rows = s.split_selection(&mut g, probs, 2);
            let v = s.compose_node(&mut g, &Selection::Relaxed(rows));
            let t = g.constant(target);
            let loss = g.squared_error(v, t);
            let graph = g.build();
            let inputs = BTreeMap::new();
            for name in book.param_names().iter().map(String::as_str).chain(["pi"]) {
                let err = finite_difference_check(&graph, &store, &inputs, loss, name, 1e-6).unwrap();
                assert!(err < 1e-4, "{kind:?} {name}: {err}");
            }
        }
    }

    #[test]
    fn binary_round_trip_is_f32_exact() {
        for kind in all_kinds() {
            let book = CodeBook::init(spec(kind, 4, 3, 5, 7), &mut seeded(3)).unwrap();
            let back = CodeBook::from_bytes(&book.to_bytes()).unwrap();
            assert_eq!(back, book.rounded_to_f32());
        }
    }

    proptest! {
        #[test]
        fn linear_sum_is_additive_in_the_codebook(seed in 0u64..1000, c0 in 0usize..3, c1 in 0usize..3, c2 in 0usize..3) {
            let s = spec(ComposerKind::LinearSum, 3, 3, 4, 4);
            let a = CodeBook::init(s, &mut seeded(seed)).unwrap();
            let b = CodeBook::init(s, &mut seeded(seed + 7919)).unwrap();
            let mut sum = a.clone();
            for (name, t) in sum.params_mut().iter_mut() {
                for (x, y) in t.data_mut().iter_mut().zip(b.params().get(name).unwrap().data()) {
                    *x += y;
                }
            }
            let sel = one_hot_rows(&[c0, c1, c2], 3);
            let va = a.compose(&sel).unwrap();
            let vb = b.compose(&sel).unwrap();
            let vs = sum.compose(&sel).unwrap();
            for i in 0..4 {
                prop_assert!((vs[i] - va[i] - vb[i]).abs() < 1e-12);
            }
        }
    }
}
