//! Dense 4-D tensors and the layer primitives the super-resolution models are
//! built from.
//!
//! Layout is `(batch, channel, height, width)`, row-major, so each sample and
//! each channel plane is a contiguous slice. Every op is a pure function: the
//! forward call returns its output, the matching `*_backward` call takes the
//! upstream gradient and returns gradients for the input and the parameters.
//!
//! All ops are generic over [`Scalar`]; training runs in `f32` and the
//! finite-difference checks in [`gradcheck`] instantiate the same code at `f64`.

mod activation;
mod batchnorm;
mod conv;
pub mod gradcheck;
mod resize;
mod scalar;

pub use activation::{activation, activation_backward, Activation};
pub use batchnorm::{batchnorm, batchnorm_backward, BnCache, BnForward, BnGrads, BnMode, BnParams};
pub use conv::{
    conv2d, conv2d_backward, conv2d_backward_input, conv_output_extent, deconv2d, deconv2d_backward,
    deconv2d_backward_input, deconv_output_extent, ConvGrads, ConvParams,
};
pub use resize::upsample_bicubic;
pub use scalar::Scalar;

use std::fmt;

use thiserror::Error;

/// Errors raised by tensor construction and the layer primitives.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected} but found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("{op}: invalid configuration: {reason}")]
    InvalidConfig { op: &'static str, reason: String },
    #[error("{op}: non-finite value while evaluating argument {arg}, element {index}")]
    NonFinite { op: String, arg: usize, index: usize },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, expected: impl fmt::Display, found: impl fmt::Display) -> Self {
        TensorError::ShapeMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn config(op: &'static str, reason: impl Into<String>) -> Self {
        TensorError::InvalidConfig {
            op,
            reason: reason.into(),
        }
    }
}

/// Extents of a [`Tensor4`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape4 {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Elements in one channel plane.
    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements in one sample (all channels).
    pub const fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// A dense `(batch, channel, height, width)` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T = f32> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn filled(shape: Shape4, value: T) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::shape(
                "tensor",
                format!("{} elements for {}", shape.numel(), shape),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize) -> T) -> Self {
        Tensor4 {
            shape,
            data: (0..shape.numel()).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample(&self, index: usize) -> &[T] {
        let n = self.shape.sample_len();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn sample_mut(&mut self, index: usize) -> &mut [T] {
        let n = self.shape.sample_len();
        &mut self.data[index * n..(index + 1) * n]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let s = self.shape;
        self.data[((n * s.channels + c) * s.height + y) * s.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::cast_from(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.expect_same_shape("add", other)?;
        Ok(Tensor4 {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) -> Result<(), TensorError> {
        self.expect_same_shape("add_scaled", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + scale * b;
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, op: &'static str, other: &Self) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::shape(op, self.shape, other.shape));
        }
        Ok(())
    }

    /// Stacks `a` and `b` along the channel axis, `a` first.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self, TensorError> {
        let (sa, sb) = (a.shape, b.shape);
        if sa.batch != sb.batch || sa.height != sb.height || sa.width != sb.width {
            return Err(TensorError::shape("concat_channels", sa, sb));
        }
        let shape = Shape4::new(sa.batch, sa.channels + sb.channels, sa.height, sa.width);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..sa.batch {
            data.extend_from_slice(a.sample(n));
            data.extend_from_slice(b.sample(n));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Inverse of [`Tensor4::concat_channels`]: splits after `first` channels.
    pub fn split_channels(&self, first: usize) -> Result<(Self, Self), TensorError> {
        let s = self.shape;
        if first > s.channels {
            return Err(TensorError::config(
                "split_channels",
                format!("cannot split {} channels after {}", s.channels, first),
            ));
        }
        let plane = s.plane();
        let mut a = Vec::with_capacity(s.batch * first * plane);
        let mut b = Vec::with_capacity(s.batch * (s.channels - first) * plane);
        for n in 0..s.batch {
            let sample = self.sample(n);
            a.extend_from_slice(&sample[..first * plane]);
            b.extend_from_slice(&sample[first * plane..]);
        }
        Ok((
            Tensor4 {
                shape: Shape4::new(s.batch, first, s.height, s.width),
                data: a,
            },
            Tensor4 {
                shape: Shape4::new(s.batch, s.channels - first, s.height, s.width),
                data: b,
            },
        ))
    }

    /// Stacks single-sample tensors of identical shape into one batch.
    pub fn stack(items: &[Self]) -> Result<Self, TensorError> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::config("stack", "no tensors to stack"))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut batch = 0;
        for t in items {
            let s = t.shape;
            if (s.channels, s.height, s.width) != (first.channels, first.height, first.width) {
                return Err(TensorError::shape("stack", first, s));
            }
            batch += s.batch;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 {
            shape: Shape4::new(batch, first.channels, first.height, first.width),
            data,
        })
    }

    /// Copies sample `index` out as a batch of one.
    pub fn select(&self, index: usize) -> Self {
        let s = self.shape;
        Tensor4 {
            shape: Shape4::new(1, s.channels, s.height, s.width),
            data: self.sample(index).to_vec(),
        }
    }
}
