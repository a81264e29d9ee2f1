//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gemm;
mod tape;
mod tensor;

#[cfg(test)]
mod tests;

pub use tape::{sigmoid, softplus, OpKind, Padding, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: String, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

impl NumericsError {
    pub(crate) fn dimension(op: &str, detail: impl Into<String>) -> Self {
        Self::Dimension { op: op.to_string(), detail: detail.into() }
    }
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
