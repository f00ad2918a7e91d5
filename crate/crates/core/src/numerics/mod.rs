//! Dense tensors and reverse-mode differentiation.

pub mod ops;
pub mod tape;
pub mod tensor;

pub use ops::EPS;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
