//! Expression matrices for paired RNA / ADT single-cell data.
//!
//! Covers ingestion (10x-style Matrix Market directories and dense CSV),
//! per-cell normalization (CLR for protein counts, RPKM or CPM for RNA),
//! high-variance gene selection and a seeded synthetic generator used for
//! end-to-end checks.

mod error;
mod hvg;
pub mod io;
mod labels;
mod matrix;
mod normalize;
mod synth;

pub use error::DataError;
pub use hvg::select_hvg;
pub use io::{load_matrix, read_dense_csv, write_dense_csv, write_matrix_market};
pub use labels::{read_labels, write_labels, LabelRecord};
pub use matrix::{ExpressionMatrix, Modality};
pub use normalize::{clr_normalize, rna_normalize, GeneLengthTable, RnaNormalization};
pub use synth::{generate_synthetic, SynthParams, SyntheticDataset};

pub type Result<T, E = DataError> = std::result::Result<T, E>;
