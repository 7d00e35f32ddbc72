use crate::Shape;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("invalid shape {0:?}: rank must be at most 3 and extents must match the data length")]
    InvalidShape(Vec<usize>),
    #[error("variable from tape {found} used on tape {expected}")]
    ForeignVar { expected: u64, found: u64 },
    #[error("contract violation in {op}: {message}")]
    Contract { op: &'static str, message: String },
}

impl AutodiffError {
    pub(crate) fn contract(op: &'static str, message: impl Into<String>) -> Self {
        AutodiffError::Contract {
            op,
            message: message.into(),
        }
    }
}
