//! Dense tensors and a small reverse-mode autodiff tape.
//!
//! Only the operators needed by value-iteration policy networks and their
//! convolutional baselines are provided: "same" convolution, channel-wise max,
//! 2x2 max pooling, dense layers, softmax cross-entropy, channel concatenation,
//! nearest-neighbour upsampling, plus a few structural helpers (rectifier,
//! addition, cell selection, cropping, weighted sums).
//!
//! Every op is available twice: as a pure kernel in [`ops`] operating on
//! [`Tensor`] values, and as a recorded operation on a [`Tape`], whose
//! [`Tape::backward`] replays the records in reverse.

mod error;
pub mod gradcheck;
pub mod ops;
mod real;
mod rmsprop;
mod tape;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{grad_check, GradCheckReport};
pub use real::Real;
pub use rmsprop::RmsProp;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
