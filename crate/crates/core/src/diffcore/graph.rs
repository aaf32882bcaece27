use std::borrow::Cow;
use std::collections::BTreeMap;

use super::tensor::{matmul_at, matmul_bt, matmul_raw};
use super::{DiffError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable operations the engine knows about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Subtract,
    Multiply,
    Scale,
    Gather,
    Softmax,
    StraightThrough,
    Sigmoid,
    Tanh,
    Relu,
    Sum,
    Mean,
    SquaredError,
    SoftmaxCrossEntropy,
    Concat,
    StopGradient,
    Reshape,
    Log,
    SliceLast,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Subtract => "subtract",
            OpKind::Multiply => "multiply",
            OpKind::Scale => "scale",
            OpKind::Gather => "gather",
            OpKind::Softmax => "softmax",
            OpKind::StraightThrough => "straight-through",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SquaredError => "squared-error",
            OpKind::SoftmaxCrossEntropy => "softmax-cross-entropy",
            OpKind::Concat => "concat",
            OpKind::StopGradient => "stop-gradient",
            OpKind::Reshape => "reshape",
            OpKind::Log => "log",
            OpKind::SliceLast => "slice",
        }
    }

    /// Ops whose backward rule deliberately disagrees with the forward map.
    pub fn is_surrogate(self) -> bool {
        matches!(self, OpKind::StraightThrough | OpKind::StopGradient)
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Param(String),
    Input(String, Vec<usize>),
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gather(NodeId, Vec<usize>),
    Softmax(NodeId, f64),
    StraightThrough(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SquaredError(NodeId, NodeId),
    SoftmaxCrossEntropy(NodeId, NodeId),
    Concat(Vec<NodeId>),
    StopGradient(NodeId),
    Reshape(NodeId, Vec<usize>),
    Log(NodeId, f64),
    SliceLast(NodeId, usize, usize),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Param(_) | Op::Input(..) | Op::Const(_) => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Subtract,
            Op::Mul(..) => OpKind::Multiply,
            Op::Scale(..) => OpKind::Scale,
            Op::Gather(..) => OpKind::Gather,
            Op::Softmax(..) => OpKind::Softmax,
            Op::StraightThrough(_) => OpKind::StraightThrough,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SquaredError(..) => OpKind::SquaredError,
            Op::SoftmaxCrossEntropy(..) => OpKind::SoftmaxCrossEntropy,
            Op::Concat(_) => OpKind::Concat,
            Op::StopGradient(_) => OpKind::StopGradient,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Log(..) => OpKind::Log,
            Op::SliceLast(..) => OpKind::SliceLast,
        })
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input(..) => "input",
            Op::Const(_) => "const",
            other => other.kind().map_or("?", OpKind::name),
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Param(_) | Op::Input(..) | Op::Const(_) => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::SquaredError(a, b)
            | Op::SoftmaxCrossEntropy(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Gather(a, _)
            | Op::Softmax(a, _)
            | Op::StraightThrough(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::StopGradient(a)
            | Op::Reshape(a, _)
            | Op::Log(a, _)
            | Op::SliceLast(a, _, _) => vec![*a],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// Named trainable tensors referenced by [`Graph`] parameter nodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// Named placeholder values fed to [`Graph::evaluate`].
pub type Inputs = BTreeMap<String, Tensor>;

/// Forward values of every node, in node order.
#[derive(Debug)]
pub struct Values<'a> {
    values: Vec<Cow<'a, Tensor>>,
}

impl Values<'_> {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.values[id.0].item()
    }
}

/// An acyclic computation over dense tensors, stored in topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn kind(&self, id: NodeId) -> Option<OpKind> {
        self.nodes[id.0].op.kind()
    }

    fn describe(&self, i: usize) -> String {
        let node = &self.nodes[i];
        match &node.label {
            Some(l) => format!("#{i} {} `{l}`", node.op.name()),
            None => format!("#{i} {}", node.op.name()),
        }
    }

    fn shape_err(&self, i: usize, detail: String) -> DiffError {
        DiffError::Shape { node: self.describe(i), detail }
    }

    /// Runs the forward pass and returns the value of every node.
    pub fn evaluate<'a>(
        &'a self,
        params: &'a ParamStore,
        inputs: &'a Inputs,
    ) -> Result<Values<'a>, DiffError> {
        let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v: Cow<'a, Tensor> = match &node.op {
                Op::Param(name) => Cow::Borrowed(
                    params.get(name).ok_or_else(|| DiffError::MissingParam(name.clone()))?,
                ),
                Op::Input(name, shape) => {
                    let t = inputs
                        .get(name)
                        .ok_or_else(|| DiffError::MissingInput(name.clone()))?;
                    if t.shape() != shape.as_slice() {
                        return Err(DiffError::InputShape {
                            name: name.clone(),
                            expected: shape.clone(),
                            got: t.shape().to_vec(),
                        });
                    }
                    Cow::Borrowed(t)
                }
                Op::Const(t) => Cow::Borrowed(t),
                op => Cow::Owned(self.forward(i, op, &values)?),
            };
            if !v.is_finite() {
                return Err(DiffError::NonFinite { node: self.describe(i) });
            }
            values.push(v);
        }
        Ok(Values { values })
    }

    fn forward(&self, i: usize, op: &Op, vals: &[Cow<'_, Tensor>]) -> Result<Tensor, DiffError> {
        let v = |id: &NodeId| -> &Tensor { &vals[id.0] };
        Ok(match op {
            Op::Param(_) | Op::Input(..) | Op::Const(_) => unreachable!("leaf handled by caller"),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(self.shape_err(
                        i,
                        format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                    ));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Add(..)) { 1.0 } else { -1.0 };
                let (a, b) = (v(a), v(b));
                let mut out = a.clone();
                if a.shape() == b.shape() {
                    for (o, &y) in out.data_mut().iter_mut().zip(b.data()) {
                        *o += sign * y;
                    }
                } else if b.rank() == 1 && b.len() == a.row_len() {
                    let w = a.row_len();
                    for (k, o) in out.data_mut().iter_mut().enumerate() {
                        *o += sign * b.data()[k % w];
                    }
                } else {
                    return Err(self.shape_err(
                        i,
                        format!("operands {:?} and {:?} do not broadcast", a.shape(), b.shape()),
                    ));
                }
                out
            }
            Op::Mul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.shape() != b.shape() {
                    return Err(self.shape_err(
                        i,
                        format!("operands {:?} and {:?} differ", a.shape(), b.shape()),
                    ));
                }
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            Op::Scale(a, f) => v(a).map(|x| x * f),
            Op::Gather(t, rows) => {
                let t = v(t);
                if t.rank() == 0 {
                    return Err(self.shape_err(i, "cannot gather from a scalar".into()));
                }
                let n = t.shape()[0];
                let stride = t.len() / n;
                let mut data = Vec::with_capacity(rows.len() * stride);
                for &r in rows {
                    if r >= n {
                        return Err(self.shape_err(i, format!("row {r} out of range for {n} rows")));
                    }
                    data.extend_from_slice(&t.data()[r * stride..(r + 1) * stride]);
                }
                if rows.is_empty() {
                    return Err(self.shape_err(i, "empty row selection".into()));
                }
                let mut shape = t.shape().to_vec();
                shape[0] = rows.len();
                Tensor::from_parts(shape, data)
            }
            Op::Softmax(x, tau) => softmax_rows(v(x), *tau),
            Op::StraightThrough(x) => {
                let x = v(x);
                let mut out = x.same_shape_zeros();
                for r in 0..x.row_count() {
                    let k = argmax(x.row(r));
                    out.row_mut(r)[k] = 1.0;
                }
                out
            }
            Op::Sigmoid(x) => v(x).map(sigmoid),
            Op::Tanh(x) => v(x).map(f64::tanh),
            Op::Relu(x) => v(x).map(|z| if z > 0.0 { z } else { 0.0 }),
            Op::Sum(x) => Tensor::scalar(v(x).sum()),
            Op::Mean(x) => Tensor::scalar(v(x).sum() / v(x).len() as f64),
            Op::SquaredError(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.shape() != b.shape() {
                    return Err(self.shape_err(
                        i,
                        format!("operands {:?} and {:?} differ", a.shape(), b.shape()),
                    ));
                }
                Tensor::scalar(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum())
            }
            Op::SoftmaxCrossEntropy(z, t) => {
                let (z, t) = (v(z), v(t));
                if z.shape() != t.shape() {
                    return Err(self.shape_err(
                        i,
                        format!("logits {:?} and targets {:?} differ", z.shape(), t.shape()),
                    ));
                }
                let mut total = 0.0;
                for (zr, tr) in z.rows().zip(t.rows()) {
                    let lse = log_sum_exp(zr);
                    total -= zr.iter().zip(tr).map(|(zv, tv)| tv * (zv - lse)).sum::<f64>();
                }
                Tensor::scalar(total / z.row_count() as f64)
            }
            Op::Concat(parts) => {
                let first = v(&parts[0]);
                let lead = &first.shape()[..first.rank().saturating_sub(1)];
                let mut width = 0;
                for p in parts {
                    let t = v(p);
                    if t.rank() == 0 || &t.shape()[..t.rank() - 1] != lead {
                        return Err(self.shape_err(
                            i,
                            format!("cannot concatenate {:?} with {:?}", first.shape(), t.shape()),
                        ));
                    }
                    width += t.row_len();
                }
                let rows = first.row_count();
                let mut data = Vec::with_capacity(rows * width);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(v(p).row(r));
                    }
                }
                let mut shape = lead.to_vec();
                shape.push(width);
                Tensor::from_parts(shape, data)
            }
            Op::StopGradient(x) => v(x).clone(),
            Op::Reshape(x, shape) => {
                let x = v(x);
                Tensor::new(shape.clone(), x.data().to_vec())
                    .map_err(|e| self.shape_err(i, e.to_string()))?
            }
            Op::Log(x, floor) => v(x).map(|z| z.max(*floor).ln()),
            Op::SliceLast(x, start, len) => {
                let x = v(x);
                if x.rank() == 0 || start + len > x.row_len() || *len == 0 {
                    return Err(self.shape_err(
                        i,
                        format!("slice {start}..{} of {:?}", start + len, x.shape()),
                    ));
                }
                let mut data = Vec::with_capacity(x.row_count() * len);
                for r in x.rows() {
                    data.extend_from_slice(&r[*start..start + len]);
                }
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = *len;
                Tensor::from_parts(shape, data)
            }
        })
    }

    fn param_node(&self, name: &str) -> Result<NodeId, DiffError> {
        self.params.get(name).copied().ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    /// Nodes whose value depends on at least one of `sources`.
    fn descendants(&self, sources: &[NodeId]) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        for s in sources {
            mark[s.0] = true;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !mark[i] && node.op.operands().iter().any(|o| mark[o.0]) {
                mark[i] = true;
            }
        }
        mark
    }

    /// Nodes on which `target` depends (including itself).
    fn ancestors(&self, target: NodeId) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        mark[target.0] = true;
        for i in (0..=target.0).rev() {
            if mark[i] {
                for o in self.nodes[i].op.operands() {
                    mark[o.0] = true;
                }
            }
        }
        mark
    }

    /// Surrogate ops (straight-through, stop-gradient) lying between `param`
    /// and `loss`.
    pub fn surrogates_between(&self, param: &str, loss: NodeId) -> Result<Vec<OpKind>, DiffError> {
        let p = self.param_node(param)?;
        let down = self.descendants(&[p]);
        let up = self.ancestors(loss);
        Ok((0..self.nodes.len())
            .filter(|&i| down[i] && up[i])
            .filter_map(|i| self.nodes[i].op.kind())
            .filter(|k| k.is_surrogate())
            .collect())
    }

    /// Reverse-mode gradient of the scalar `loss` with respect to the named
    /// parameters.
    pub fn gradient(
        &self,
        values: &Values<'_>,
        loss: NodeId,
        wrt: &[&str],
    ) -> Result<BTreeMap<String, Tensor>, DiffError> {
        let loss_val = values.get(loss);
        if loss_val.len() != 1 {
            return Err(DiffError::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let sources = wrt.iter().map(|n| self.param_node(n)).collect::<Result<Vec<_>, _>>()?;
        let live = self.descendants(&sources);
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_parts(loss_val.shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            if !live[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Param(_)) {
                grads[i] = Some(g);
                continue;
            }
            for (operand, contrib) in self.backward(&node.op, values, i, &g) {
                if !live[operand.0] {
                    continue;
                }
                match &mut grads[operand.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let mut out = BTreeMap::new();
        for (name, id) in wrt.iter().zip(&sources) {
            let g = grads[id.0]
                .clone()
                .unwrap_or_else(|| values.get(*id).same_shape_zeros());
            out.insert((*name).to_string(), g);
        }
        Ok(out)
    }

    /// Vector-Jacobian products of one node with respect to its operands.
    fn backward(&self, op: &Op, vals: &Values<'_>, i: usize, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let v = |id: &NodeId| vals.get(*id);
        let out = vals.get(NodeId(i));
        match op {
            Op::Param(_) | Op::Input(..) | Op::Const(_) => Vec::new(),
            Op::MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let ga = matmul_bt(g.data(), bv.data(), m, n, k);
                let gb = matmul_at(av.data(), g.data(), m, k, n);
                vec![
                    (*a, Tensor::from_parts(vec![m, k], ga)),
                    (*b, Tensor::from_parts(vec![k, n], gb)),
                ]
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Add(..)) { 1.0 } else { -1.0 };
                let bv = v(b);
                let gb = if bv.shape() == g.shape() {
                    g.map(|x| sign * x)
                } else {
                    let mut acc = bv.same_shape_zeros();
                    let w = bv.len();
                    for (k, x) in g.data().iter().enumerate() {
                        acc.data_mut()[k % w] += sign * x;
                    }
                    acc
                };
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let ga = zip_map(g, bv, |x, y| x * y);
                let gb = zip_map(g, av, |x, y| x * y);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, f) => vec![(*a, g.map(|x| x * f))],
            Op::Gather(t, rows) => {
                let tv = v(t);
                let stride = tv.len() / tv.shape()[0];
                let mut acc = tv.same_shape_zeros();
                for (slot, &r) in rows.iter().enumerate() {
                    let dst = &mut acc.data_mut()[r * stride..(r + 1) * stride];
                    for (d, s) in dst.iter_mut().zip(&g.data()[slot * stride..(slot + 1) * stride]) {
                        *d += s;
                    }
                }
                vec![(*t, acc)]
            }
            Op::Softmax(x, tau) => {
                let mut gx = out.same_shape_zeros();
                for r in 0..out.row_count() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in gx.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = yv * (gv - dot) / tau;
                    }
                }
                vec![(*x, gx)]
            }
            Op::StraightThrough(x) => vec![(*x, g.clone())],
            Op::Sigmoid(x) => vec![(*x, zip_map(g, out, |gv, y| gv * y * (1.0 - y)))],
            Op::Tanh(x) => vec![(*x, zip_map(g, out, |gv, y| gv * (1.0 - y * y)))],
            Op::Relu(x) => vec![(*x, zip_map(g, v(x), |gv, z| if z > 0.0 { gv } else { 0.0 }))],
            Op::Sum(x) => vec![(*x, v(x).map(|_| g.item()))],
            Op::Mean(x) => {
                let n = v(x).len() as f64;
                vec![(*x, v(x).map(|_| g.item() / n))]
            }
            Op::SquaredError(a, b) => {
                let s = 2.0 * g.item();
                let ga = zip_map(v(a), v(b), |x, y| s * (x - y));
                let gb = ga.map(|x| -x);
                vec![(*a, ga), (*b, gb)]
            }
            Op::SoftmaxCrossEntropy(z, t) => {
                let (zv, tv) = (v(z), v(t));
                let scale = g.item() / zv.row_count() as f64;
                let mut gz = zv.same_shape_zeros();
                let mut gt = tv.same_shape_zeros();
                for r in 0..zv.row_count() {
                    let zr = zv.row(r);
                    let tr = tv.row(r);
                    let lse = log_sum_exp(zr);
                    let tsum: f64 = tr.iter().sum();
                    for k in 0..zr.len() {
                        let p = (zr[k] - lse).exp();
                        gz.row_mut(r)[k] = scale * (p * tsum - tr[k]);
                        gt.row_mut(r)[k] = -scale * (zr[k] - lse);
                    }
                }
                vec![(*z, gz), (*t, gt)]
            }
            Op::Concat(parts) => {
                let rows = g.row_count();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let pv = v(p);
                    let w = pv.row_len();
                    let mut gp = pv.same_shape_zeros();
                    for r in 0..rows {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    res.push((*p, gp));
                }
                res
            }
            Op::StopGradient(_) => Vec::new(),
            Op::Reshape(x, _) => {
                let shape = v(x).shape().to_vec();
                vec![(*x, Tensor::from_parts(shape, g.data().to_vec()))]
            }
            Op::Log(x, floor) => {
                vec![(*x, zip_map(g, v(x), |gv, z| if z > *floor { gv / z } else { 0.0 }))]
            }
            Op::SliceLast(x, start, len) => {
                let xv = v(x);
                let mut gx = xv.same_shape_zeros();
                for r in 0..xv.row_count() {
                    gx.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                vec![(*x, gx)]
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = k;
        }
    }
    best
}

/// Row-wise `softmax(x / tau)` along the last axis.
pub(crate) fn softmax_rows(x: &Tensor, tau: f64) -> Tensor {
    let mut out = x.same_shape_zeros();
    for r in 0..x.row_count() {
        let row = x.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = out.row_mut(r);
        let mut total = 0.0;
        for (d, &z) in dst.iter_mut().zip(row) {
            *d = ((z - m) / tau).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Records operations into a [`Graph`].
#[derive(Default)]
pub struct GraphBuilder {
    graph: Graph,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let n = self.graph.nodes.len();
        for o in op.operands() {
            assert!(o.0 < n, "operand {o:?} does not precede node {n}");
        }
        self.graph.nodes.push(Node { op, label: None });
        NodeId(n)
    }

    /// Trainable parameter looked up by name at evaluation time. Repeated
    /// calls with the same name return the same node.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.graph.params.get(name) {
            return id;
        }
        let id = self.push(Op::Param(name.to_string()));
        self.graph.params.insert(name.to_string(), id);
        id
    }

    /// Placeholder that must be fed with a tensor of exactly `shape`.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        assert!(!self.graph.inputs.contains_key(name), "duplicate input `{name}`");
        let id = self.push(Op::Input(name.to_string(), shape.to_vec()));
        self.graph.inputs.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn label(&mut self, id: NodeId, label: &str) -> NodeId {
        self.graph.nodes[id.0].label = Some(label.to_string());
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// Elementwise sum; `b` may also be a vector broadcast along the last axis.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    /// Selects slices along the first axis.
    pub fn gather(&mut self, table: NodeId, rows: Vec<usize>) -> NodeId {
        self.push(Op::Gather(table, rows))
    }

    /// Tempered softmax along the last axis. `tau` must be positive.
    pub fn softmax(&mut self, x: NodeId, tau: f64) -> NodeId {
        assert!(tau > 0.0, "temperature must be positive");
        self.push(Op::Softmax(x, tau))
    }

    /// Forward: one-hot of the row argmax. Backward: identity.
    pub fn straight_through(&mut self, x: NodeId) -> NodeId {
        self.push(Op::StraightThrough(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    /// `Σ (a - b)²` over all entries.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::SquaredError(a, b))
    }

    /// Mean over rows of `-Σ t · log_softmax(z)`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy(logits, targets))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat needs at least one operand");
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        self.push(Op::StopGradient(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(x, shape.to_vec()))
    }

    /// `ln(max(x, floor))`.
    pub fn log(&mut self, x: NodeId, floor: f64) -> NodeId {
        self.push(Op::Log(x, floor))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceLast(x, start, len))
    }

    pub fn build(self) -> Graph {
        self.graph
    }
}
