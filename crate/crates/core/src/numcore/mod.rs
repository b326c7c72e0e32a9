//! Dense tensors, reverse-mode autodiff and the neural primitives used by the
//! model.

pub mod gradcheck;
mod mask;
mod scalar;
mod tape;
mod tensor;

pub use mask::Mask;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
