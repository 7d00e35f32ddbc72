//! TTT-based fusion model for paired RNA and surface-protein profiles.

pub mod checkpoint;
pub mod embedding;
mod error;
pub mod model;
pub mod params;
pub mod training;
pub mod ttt;

pub use error::CoreError;
pub use model::{FusionModel, ModelConfig, Stage};
pub use params::{Grads, ParamId, ParamStore, Session};

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
