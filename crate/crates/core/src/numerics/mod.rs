//! Dense tensors, NHWC kernels and a reverse-mode tape.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{CustomOp, Gradients, Graph, NodeId};
pub use kernels::Padding;
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}: non-finite value")]
    NonFinite(&'static str),
}

impl NumericsError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NumericsError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
