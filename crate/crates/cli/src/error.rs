use std::path::PathBuf;

use ttt_omics_cluster::ClusterError;
use ttt_omics_core::CoreError;
use ttt_omics_data::DataError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing {what} {}: {reason}", path.display())]
    MissingInput {
        what: &'static str,
        path: PathBuf,
        reason: String,
    },
    #[error("{0}")]
    Join(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for usage and configuration problems, 1 for everything that goes
    /// wrong while computing.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingInput { .. } | CliError::Core(CoreError::Config(_)) => 2,
            _ => 1,
        }
    }
}
