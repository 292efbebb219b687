//! Inputs shared by the benchmarks.

use srdrm::datakit::ImageRgb8;
use srdrm::{Shape4, Tensor4};

/// Deterministic tensor in `[-1, 1]`.
pub fn pattern(shape: Shape4) -> Tensor4<f32> {
    Tensor4::from_fn(shape, |i| {
        ((i.wrapping_mul(2_654_435_761) % 2001) as f32 / 1000.0) - 1.0
    })
}

/// Deterministic textured image.
pub fn textured(width: usize, height: usize) -> ImageRgb8 {
    ImageRgb8::from_fn(width, height, |x, y| {
        [
            ((x * 7 + y * 3) % 256) as u8,
            ((x * x + y) % 256) as u8,
            (((x ^ y) * 5) % 256) as u8,
        ]
    })
}
