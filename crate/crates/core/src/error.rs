use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("unsupported operation `{0}`")]
    UnsupportedOp(String),
    #[error("{op} takes {expected} input(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("node {0} is not a registered leaf")]
    UnknownLeaf(usize),
    #[error("checkpoint markers must be strictly increasing inside (0, {steps}), got {markers:?}")]
    CheckpointOrder { markers: Vec<usize>, steps: usize },
    #[error("expected {expected} values, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("diverged at outer iteration {outer_iteration}, inner step {inner_step:?}: non-finite value in {op}")]
    Divergence {
        outer_iteration: usize,
        inner_step: Option<usize>,
        op: &'static str,
    },
}

impl Error {
    /// Tags a numerical failure with the outer iteration it happened in,
    /// keeping any inner step already recorded.
    pub(crate) fn in_outer_iteration(self, outer_iteration: usize) -> Self {
        match self {
            Error::NonFinite { op } => Error::Divergence {
                outer_iteration,
                inner_step: None,
                op,
            },
            Error::Divergence { inner_step, op, .. } => Error::Divergence {
                outer_iteration,
                inner_step,
                op,
            },
            other => other,
        }
    }
}
