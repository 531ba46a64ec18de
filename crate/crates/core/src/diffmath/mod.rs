//! Minimal reverse-mode differentiation over dense `f64` vectors and matrices.
//!
//! A [`Graph`] is built eagerly from primitives; every node keeps its value so
//! [`Graph::backward`] can replay the tape in reverse creation order. The
//! accumulation order is fixed, so two backward passes over the same graph
//! produce bit-identical [`GradientMap`]s.
//!
//! [`finite_diff_check`] compares the analytic gradients against central
//! differences by rebuilding the graph from perturbed parameter values.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_params, GradCheckReport};
pub use graph::{cosine, dot, logsumexp, norm, sigmoid, softmax, Graph, Var, COSINE_EPS};
pub use params::{GradientMap, ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("tensors of rank {rank} are not supported")]
    Rank { rank: usize },
    #[error("data length {actual} does not match shape (expected {expected})")]
    DataLength { expected: usize, actual: usize },
    #[error("parameter {name}: expected shape {expected:?}, got {actual:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward called on a graph with no evaluated nodes")]
    NotEvaluated,
    #[error("node {node} does not belong to this graph")]
    UnknownNode { node: usize },
    #[error("finite-difference epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("{0}")]
    InvalidArgument(String),
}

#[cfg(test)]
mod tests;
