//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Supports gradients of gradients for dense networks, which gradient
//! penalties require, and first-order gradients through NHWC convolutions.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod tensor;

pub use conv::ConvGeom;
pub use graph::{Graph, Var};
pub use nn::{Activation, Adam, BatchNorm, BnMode, Conv2d, ConvTranspose2d, Linear, Mlp, Module};
pub use tensor::Tensor;
