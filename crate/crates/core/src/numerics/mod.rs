//! Dense tensors and reverse-mode differentiation.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::*;
