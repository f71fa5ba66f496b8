//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod adam;
mod check;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, OptimState};
pub use check::grad_check;
pub use tape::{attention_weights, forward, Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;
