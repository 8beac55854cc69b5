//! Reverse-mode differentiation and the transformer layers built on it.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
