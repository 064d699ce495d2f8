//! Minimal dense-tensor arithmetic with reverse-mode gradient accumulation.
//!
//! The tape is define-by-run: forward ops record just enough to replay the
//! chain rule backwards. Tensors are immutable once created; a tape is
//! single-threaded, but distinct tapes can run on distinct threads.

mod tape;
mod tensor;


pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<V> = std::result::Result<V, NumericsError>;
