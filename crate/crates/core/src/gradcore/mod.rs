//! Reverse-mode automatic differentiation over dense arrays.
//!
//! The op set is deliberately small: what the VQVAE and the transformer
//! need, nothing else. Broadcasting exists only for bias addition.

mod array;
mod checkpoint;
mod conv;
mod gradcheck;
mod graph;
mod params;
mod suite;

pub use array::{Array, Real};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Node, ScalarFn, Var};
pub use params::{AdamConfig, ParamStore};
pub use suite::op_suite;

pub(crate) use graph::softmax_in_place;
#[cfg(test)]
pub(crate) use suite::probe;

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint: truncated")]
    Truncated,
    #[error("checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
