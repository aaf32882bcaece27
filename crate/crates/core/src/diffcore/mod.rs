//! A small reverse-mode differentiation engine over dense `f64` tensors.
//!
//! Graphs are recorded with [`GraphBuilder`], evaluated against a
//! [`ParamStore`] and a set of named [`Inputs`], and differentiated with
//! [`Graph::gradient`]. Two surrogate ops break the usual chain rule on
//! purpose: [`GraphBuilder::stop_gradient`] (zero backward) and
//! [`GraphBuilder::straight_through`] (hard one-hot forward, identity
//! backward).

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_difference_check, RELATIVE_FLOOR};
pub use graph::{argmax, Graph, GraphBuilder, Inputs, NodeId, OpKind, ParamStore, Values};
pub(crate) use graph::softmax_rows;
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("shape mismatch at node {node}: {detail}")]
    Shape { node: String, detail: String },
    #[error("non-finite value produced at node {node}")]
    NonFinite { node: String },
    #[error("no value fed for input `{0}`")]
    MissingInput(String),
    #[error("input `{name}` expects shape {expected:?}, got {got:?}")]
    InputShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("parameter `{0}` has no value in the store")]
    MissingParam(String),
    #[error("parameter `{0}` is not part of the graph")]
    UnknownParam(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("checked path crosses a {0} node, which finite differences cannot validate")]
    SurrogateOnPath(&'static str),
    #[error("finite-difference epsilon must lie in (0, 1e-2], got {0}")]
    BadEpsilon(f64),
}
