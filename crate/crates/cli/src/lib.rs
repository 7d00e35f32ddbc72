//! Command-line pipeline: synthetic data, preprocessing, three training
//! stages, embedding export and clustering evaluation.

pub mod config;
mod error;
pub mod pipeline;

pub use config::{Layout, PipelineConfig};
pub use error::CliError;

pub type Result<T, E = CliError> = std::result::Result<T, E>;
