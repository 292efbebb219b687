//! Single-image super-resolution with deep residual multiplier networks.

pub mod datakit;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use tensor::{Shape4, Tensor4};
