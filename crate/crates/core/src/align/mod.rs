//! Token alignment core: a small dense kernel, the cross-attention
//! resampler, alignment and contrastive losses, and a gradient checker.
//!
//! All numerics are `f64`. Every loss returns its value together with
//! analytic gradients for both token blocks.

mod gradcheck;
mod loss;
mod resampler;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, REL_FLOOR};
pub use loss::{loss_global, loss_itc, loss_local, LossValue};
pub use resampler::{resample, resample_traced, AttentionWeights, ResamplerParams, ResamplerTrace};
pub use tensor::{dot, TokenMatrix};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("{what}: expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        what: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("token matrix must be non-empty, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("expected {expected} values, got {actual}")]
    DataLength { expected: usize, actual: usize },
    #[error("rows have differing lengths")]
    RaggedRows,
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("resampler parameters contain non-finite values")]
    NonFiniteParams,
    #[error("resampler needs at least one layer")]
    NoLayers,
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("{which} row {row} has zero norm; cosine similarity undefined")]
    ZeroNorm { which: String, row: usize },
    #[error("tensor format: {0}")]
    Format(String),
}
