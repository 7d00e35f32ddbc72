//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Every trainable computation in the workspace is recorded on a [`Tape`]
//! as a sequence of [`Var`] nodes. Calling [`Tape::backward`] on a scalar
//! node populates the gradient of every ancestor that requires one.
//!
//! Tensors are row-major `f64` arrays of rank at most 3. Operations that
//! are awkward to express as a chain of primitive kernels (for example a
//! recurrence with thousands of steps) can be recorded as a single node
//! with a hand-written backward through [`CustomOp`].

mod error;
pub mod fd;
pub mod kernels;
mod shape;
mod tape;

pub use error::AutodiffError;
pub use fd::{finite_difference_gradient, relative_error};
pub use shape::Shape;
pub use tape::{CustomOp, ElementwiseKind, Tape, Tensor, Var};

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
