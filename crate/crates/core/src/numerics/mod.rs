//! Dense tensors, reverse-mode differentiation and gradient checking.

mod gradcheck;
mod graph;
mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport, ParamCheck, MAX_EPSILON, MIN_EPSILON};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use tensor::{ParamGroup, ParamId, ParamStore, Parameter, Tensor};

pub(crate) use graph::sigmoid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParameter(String),
}
