//! Reverse-mode automatic differentiation for small convolutional networks.
//!
//! Graphs are rebuilt on every forward pass: parameters enter as
//! [`Var::leaf`] when they should receive gradients and as
//! [`Var::constant`] when they are frozen, so a frozen network contributes
//! no gradient to its own weights while still propagating gradients to
//! its inputs.

mod conv;
mod ops;
mod optim;
mod tensor;
mod var;

pub use conv::ConvGeometry;
pub use ops::{sigmoid, sum};
pub use optim::{clip_global_norm, Adam};
pub use tensor::Tensor;
pub use var::{Gradients, Var};
