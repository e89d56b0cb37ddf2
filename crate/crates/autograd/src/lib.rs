//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Gradients can be requested with `create_graph = true`, in which case they
//! are ordinary graph nodes and may be differentiated again. The op set is
//! small: enough for convolutional encoder/decoder networks, patch critics,
//! MLP heads with batch statistics, and contrastive objectives.

mod ops;
mod tensor;
mod var;

pub use ops::*;
pub use tensor::{conv_out_len, ConvGeometry, Tensor};
pub use var::{grad, Var};

#[derive(Debug, thiserror::Error)]
pub enum AutogradError {
    #[error("gradient root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}
