//! Error type shared by all core modules.

use alloc::string::String;

/// Errors raised by the numerical core and the model layers.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch in {op}: left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    /// An operation produced a NaN or infinite entry.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    /// A propagation graph violated a structural invariant.
    #[error("invalid graph{}: {reason}", id.as_ref().map(|i| alloc::format!(" '{i}'")).unwrap_or_default())]
    InvalidGraph { id: Option<String>, reason: String },
    /// A dataset-level invariant was violated.
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    /// A configuration value was outside its documented range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    /// A named parameter was missing or had the wrong shape.
    #[error("parameter store: {0}")]
    ParamStore(String),
    /// Training encountered a non-finite loss and aborted.
    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite loss")]
    Diverged { epoch: usize, batch: usize },
}

pub type Result<T> = core::result::Result<T, CoreError>;
