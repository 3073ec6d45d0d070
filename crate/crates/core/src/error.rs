use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

/// Errors raised by the core engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid axis {axis} for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient; run backward first")]
    MissingGradient(String),

    #[error("timestamp gap at data row {row}: expected {expected}, found {found}")]
    TimestampGap { row: usize, expected: i64, found: i64 },

    #[error("duplicate or decreasing timestamp at data row {row}")]
    DuplicateTimestamp { row: usize },

    #[error("non-finite value at data row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },

    #[error(
        "non-finite {stage} loss at iteration {iteration} (lr {lr}, weight grad norm {weight_grad_norm}, arch grad norm {arch_grad_norm})"
    )]
    NonFiniteLoss {
        stage: &'static str,
        iteration: usize,
        lr: f64,
        weight_grad_norm: f64,
        arch_grad_norm: f64,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Attach the name of the failing pipeline stage.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } | Error::NonFiniteLoss { .. } => self,
            other => Error::Stage {
                stage,
                message: alloc::format!("{other}"),
            },
        }
    }
}
