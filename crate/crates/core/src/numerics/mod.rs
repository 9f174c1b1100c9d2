//! Dense tensors, a reverse-mode gradient tape, and the Adam optimizer.
//!
//! A [`Tape`] is built for one forward pass, consumed by one call to
//! [`Tape::backward`], and dropped (or [`Tape::reset`]). Leaves bound to a
//! parameter index with [`Tape::param`] route their gradients back into the
//! owning [`Tensor`]s through [`Gradients::accumulate_into`].

mod adam;
mod element;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use element::{Element, Precision};
pub(crate) use element::{matmul_nn, matmul_nt, matmul_tn};
pub use tape::{BatchStats, Gradients, Padding, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value in {phase} pass")]
    NonFinite { op: &'static str, phase: &'static str },
    #[error("{op}: invalid argument ({detail})")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; reset it before reuse")]
    TapeConsumed,
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
