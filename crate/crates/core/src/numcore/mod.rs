//! Dense tensors, numeric kernels and a reverse-mode autograd tape.

pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use scalar::Scalar;
pub use tape::{backward_into_params, Tape, Var};
pub use tensor::{Parameter, Tensor};
