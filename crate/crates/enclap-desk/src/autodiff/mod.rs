//! Minimal reverse-mode automatic differentiation engine.
//!
//! Dense 64-bit tensors, a growable computation graph of `Var` handles,
//! and a backward pass that accumulates gradients into a [`ParamStore`].
//! Gradients accumulate until explicitly zeroed, so a combined loss can be
//! differentiated either in one pass or as the sum of separate passes.

mod fdcheck;
mod graph;
mod loss;
mod optim;
mod params;
mod schedule;
mod tensor;

pub use fdcheck::{central_difference, max_rel_error, rel_error};
pub use graph::{Graph, Var};
pub use loss::label_smoothed_nll;
pub use optim::AdamWState;
pub use params::{ParamId, ParamStore};
pub use schedule::LrSchedule;
pub use tensor::Tensor;

use thiserror::Error;

/// Errors surfaced by the autodiff engine.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got {numel} elements")]
    NonScalarOutput { numel: usize },
    #[error("index out of range in {op}: {detail}")]
    IndexOutOfRange { op: &'static str, detail: String },
    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
