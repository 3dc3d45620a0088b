use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        found: usize,
    },

    #[error("{op}: expected rank {expected}, found rank {found}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("shape {shape:?} holds {expected} elements but {found} values were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("shape {0:?} contains a zero-sized dimension")]
    EmptyDimension(Vec<usize>),

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any tensor that requires a gradient")]
    DetachedLoss,

    #[error("variable #{0} does not belong to this graph")]
    UnknownVar(usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
