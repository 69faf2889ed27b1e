//! Minimal dense/convolutional building blocks with hand-written adjoints.

pub mod adam;
pub mod layers;
pub mod ops;
pub mod real;

pub use adam::Adam;
pub use layers::{Conv2d, Linear, ModConv, ModConvCache};
pub use real::{matmul, Real};
