//! Dense 64-bit tensors with a recording tape for reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations are
//! methods on the tape that take and return [`Var`] handles; [`Tape::backward`]
//! replays the recorded operations in reverse. Learnable weights live in a
//! [`ParamStore`] and are bound onto a tape per forward pass, so gradients from
//! several passes accumulate into the same buffers.
//!
//! Broadcasting is never implicit: elementwise binary ops require equal shapes and
//! [`Tape::broadcast_to`] expands operands explicitly.

pub mod checkpoint;
mod error;
pub mod fdcheck;
mod params;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;
