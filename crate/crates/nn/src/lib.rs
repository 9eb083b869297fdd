//! Minimal reverse-mode autograd engine for `f64` tensors.
//!
//! Built for small recurrent/convolutional generative models that need
//! exact double backprop (gradient penalties differentiate a gradient norm)
//! and bit-reproducible training on a single core. The op set is deliberately
//! small; layers are compositions in [`layers`].

pub mod adam;
pub mod conv;
pub mod layers;
pub mod params;
pub mod tensor;

pub use adam::Adam;
pub use conv::{ConvGeom, ConvGeom3};
pub use params::{ParamSet, Vars};
pub use tensor::{grad, Tensor};
