//! Dense `f64` tensors, a reverse-mode tape, finite-difference checking and optimizers.

mod gradcheck;
mod optim;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck, DEFAULT_STEP};
pub use optim::{Optimizer, OptimizerKind};
pub use real::{Dd, Real};
pub use tape::{sigmoid, Activation, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{Tensor, MAX_RANK};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("tensor rank {rank} exceeds the supported maximum of 3")]
    Rank { rank: usize },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
}
