//! Minimal reverse-mode automatic differentiation over `f64` tensors.

pub mod dist;
mod gemm;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{analytic_grad, finite_diff_check};
pub use graph::{Graph, OpKind, Var, LAYER_NORM_EPS};
pub use optim::OptimizerState;
pub use params::{Bound, Param, ParamId, ParamSet};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("{op}: index {index} out of range (< {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("{op}: non-finite result")]
    NonFinite { op: &'static str },
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("cross-entropy: no rows carry a target")]
    EmptyTargets,
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
}
