//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every evaluation: parameters are copied in as
//! leaves, the forward pass is recorded, and [`Graph::backward`] returns exact
//! gradients for the recorded computation.

mod graph;
mod mlp;
mod optim;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use mlp::{Activation, LayerNorm, Linear, Mlp, MlpVars};
pub use optim::{Optimizer, OptimizerConfig};
pub use tensor::{log_sum_exp, sigmoid, softmax, softplus, softplus_inv, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {count} values")]
    ElementCount { shape: Vec<usize>, count: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}
