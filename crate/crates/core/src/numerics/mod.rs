//! Dense tensors, a reverse-mode tape and a finite-difference checker.

pub mod gradcheck;
mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use tape::{Gradients, ParamId, Tape, Var};
pub use tensor::Tensor;
