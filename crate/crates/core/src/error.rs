use std::path::PathBuf;

use ttt_omics_autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("contract violation in {op}: {message}")]
    Contract { op: &'static str, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad checkpoint: {message}")]
    Format { path: PathBuf, message: String },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
}

impl CoreError {
    pub(crate) fn contract(op: &'static str, message: impl Into<String>) -> Self {
        CoreError::Contract {
            op,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        CoreError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
