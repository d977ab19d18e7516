//! Dense-tensor numeric core with reverse-mode automatic differentiation.
//!
//! Tensors are nodes on a [`Tape`]: an append-only record of primitive ops in
//! topological order. [`Tape::backward`] walks the record once in reverse and
//! returns per-node gradients; a tape accepts no further ops after that.
//! Trainable state lives outside the tape in a [`Params`] store and is leased
//! onto it per forward pass ([`Tape::param`], [`Tape::param_rows`]), so the
//! tape itself is cheap to drop after every batch.
//!
//! Every forward op validates shapes and scans its output for non-finite
//! values: NaN/Inf is an error, never a silent state.

mod gradcheck;
mod optim;
mod params;
mod tape;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use optim::{Adadelta, Optimizer, SgdMomentum};
pub use params::{Param, Params};
pub use tape::{Gradients, Tape, TensorId};

use thiserror::Error;

/// Errors produced by tensor ops, optimizers, and gradient checks.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: input shorter than kernel ({n} < {l})")]
    TooShort { op: &'static str, n: usize, l: usize },
    #[error("{op}: produced a non-finite value from finite inputs")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dropout rate {rate} outside [0, 1)")]
    DropoutRate { rate: f64 },
    #[error("data length {len} does not match shape {shape:?}")]
    DataShape { len: usize, shape: Vec<usize> },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter {0:?} already registered")]
    DuplicateParam(String),
    #[error("missing gradient for parameter {0:?}")]
    MissingGrad(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
