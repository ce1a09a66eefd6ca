use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the distillation core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("inner loop diverged: non-finite loss at step {step}")]
    InnerDiverged { step: usize },

    #[error("generalization loss is non-finite at outer iteration {iteration}")]
    OuterDiverged { iteration: usize },

    #[error("node {index} is not on this tape (tape holds {len} nodes)")]
    UnknownNode { index: usize, len: usize },

    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("budget of {budget} floats cannot hold {bases} base floats plus one addressing matrix of {per_matrix} floats")]
    Budget {
        budget: u64,
        bases: u64,
        per_matrix: u64,
    },

    #[error("class {class}: average coefficient vector has zero norm")]
    ZeroCoefficients { class: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
