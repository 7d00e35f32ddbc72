#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClusterError {
    #[error("contract violation in {op}: {message}")]
    Contract { op: &'static str, message: String },
}

impl ClusterError {
    pub(crate) fn contract(op: &'static str, message: impl Into<String>) -> Self {
        ClusterError::Contract {
            op,
            message: message.into(),
        }
    }
}
