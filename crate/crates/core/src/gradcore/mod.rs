//! Minimal reverse-mode automatic differentiation over dense f64 arrays.

mod adam;
mod check;
pub mod checkpoint;
mod nn;
mod ops;
pub mod parallel;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use check::{gradient_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use nn::{
    batchnorm1d, complex_kernel, complex_maxpool1d, conv1d, linear, log_softmax, maxpool1d,
    softmax, BatchStats, BnMode,
};
pub use nn::BN_EPS;
pub use params::ParamStore;
pub use ops::{concat, gather_rows, masked_log1p_sum_exp, pick, row_l2_normalize, slice_rows};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("batch normalization in training mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("{op}: vector norm below 1e-12 (row {row})")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("index {index} out of range {bound} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl GradError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        GradError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
