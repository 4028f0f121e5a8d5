//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computation happens
//! on a [`Tape`]: leaves are registered with [`Tape::var`] (tracked) or
//! [`Tape::constant`], every op on a [`Var`] appends a node, and
//! [`Tape::backward`] sweeps the tape in reverse.
//!
//! Binary ops broadcast with trailing-dimension alignment. `max` routes its
//! gradient to the first maximal index.

mod gradcheck;
pub(crate) mod kernels;
mod shape;
mod tape;
mod value;

pub use gradcheck::{grad_check, relative_error, REL_ERR_FLOOR};
pub use tape::{broadcast, BinaryOp, NodeId, ReduceOp, Tape, UnaryOp, Var};
pub use value::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} is invalid for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
}
