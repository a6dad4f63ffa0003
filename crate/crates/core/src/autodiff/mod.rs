//! Dense `f64` tensors with a dynamic reverse-mode tape.

pub mod kernels;
mod optim;
mod tape;
mod tensor;

pub use optim::sgd_step;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
