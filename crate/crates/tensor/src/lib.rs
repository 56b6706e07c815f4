//! Dense `f64` tensors with tape-based reverse-mode differentiation,
//! first-order optimizers and a few fully connected building blocks.

pub mod check;
mod error;
pub mod nn;
pub mod optim;
mod param;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{clip_grad_norm, Adam, Optimizer, RAdam};
pub use param::Param;
pub use tape::{log_sum_exp, Gradients, Tape, Var};
pub use tensor::{decode_tensors, encode_tensors, Tensor};
