//! 2-D convolution and transposed convolution.
//!
//! Both are lowered to a single matrix product per sample through an
//! `im2col` patch matrix. The patch matrix is built a band of output rows at a
//! time so full-resolution images do not materialize the whole matrix.
//!
//! Weight layouts follow the usual convention of each operator:
//! `conv2d` uses `(out, in, kh, kw)` and `deconv2d` uses `(in, out, kh, kw)`,
//! which makes the transposed convolution the exact adjoint of a convolution
//! sharing the same weight tensor.

use rayon::prelude::*;

use super::{Scalar, Shape4, Tensor4, TensorError};

/// Upper bound on the number of patch-matrix elements built at once.
const PATCH_BUDGET: usize = 1 << 20;

/// Weights and geometry of a convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    /// Builds conv parameters; `bias` length must equal `weight`'s first extent.
    ///
    /// For a transposed convolution pass the `(in, out, kh, kw)` weight and a
    /// bias of length `out`, then use [`ConvParams::new_transposed`].
    pub fn new(weight: Tensor4<T>, bias: Vec<T>, stride: usize, padding: usize) -> Result<Self, TensorError> {
        let p = ConvParams {
            weight,
            bias,
            stride,
            padding,
        };
        p.validate("conv2d", false)?;
        Ok(p)
    }

    pub fn new_transposed(
        weight: Tensor4<T>,
        bias: Vec<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let p = ConvParams {
            weight,
            bias,
            stride,
            padding,
        };
        p.validate("deconv2d", true)?;
        Ok(p)
    }

    fn validate(&self, op: &'static str, transposed: bool) -> Result<(), TensorError> {
        let s = self.weight.shape();
        let out = if transposed { s.channels } else { s.batch };
        if self.bias.len() != out {
            return Err(TensorError::shape(
                op,
                format!("bias of length {out}"),
                format!("bias of length {}", self.bias.len()),
            ));
        }
        if self.stride == 0 {
            return Err(TensorError::config(op, "stride must be at least 1"));
        }
        if s.numel() == 0 {
            return Err(TensorError::config(op, format!("empty weight tensor {s}")));
        }
        Ok(())
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.height, s.width)
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|&b| U::cast_from(b.as_f64())).collect(),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T = f32> {
    pub d_input: Tensor4<T>,
    pub d_weight: Tensor4<T>,
    pub d_bias: Vec<T>,
}

/// Output extent of a convolution along one axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize, TensorError> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return Err(TensorError::config(
            "conv2d",
            format!(
                "non-positive output extent for input {input}, kernel {kernel}, stride {stride}, padding {padding}"
            ),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn deconv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize, TensorError> {
    let full = stride * input.saturating_sub(1) + kernel;
    if input == 0 || stride == 0 || full <= 2 * padding {
        return Err(TensorError::config(
            "deconv2d",
            format!(
                "non-positive output extent for input {input}, kernel {kernel}, stride {stride}, padding {padding}"
            ),
        ));
    }
    Ok(full - 2 * padding)
}

/// Sliding-window geometry between an image of `channels x height x width`
/// and a grid of `out_h x out_w` kernel positions.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn band_rows(&self) -> usize {
        (PATCH_BUDGET / (self.patch_len() * self.out_w).max(1)).clamp(1, self.out_h.max(1))
    }

    fn bands(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.band_rows();
        let out_h = self.out_h;
        (0..out_h).step_by(step).map(move |y0| (y0, (y0 + step).min(out_h)))
    }

    #[inline]
    fn source(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Fills `cols` (rows `(c, ky, kx)`, columns the output positions of rows
    /// `y0..y1`) with image samples, zero outside the image.
    fn im2col<T: Scalar>(&self, image: &[T], y0: usize, y1: usize, cols: &mut [T]) {
        let n = (y1 - y0) * self.out_w;
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for (band_y, oy) in (y0..y1).enumerate() {
                        let seg = &mut dst[band_y * self.out_w..(band_y + 1) * self.out_w];
                        match self.source(oy, ky, self.height) {
                            None => seg.fill(T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.width..(iy + 1) * self.width];
                                for (ox, v) in seg.iter_mut().enumerate() {
                                    *v = match self.source(ox, kx, self.width) {
                                        Some(ix) => src[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters `cols` back into `image`,
    /// accumulating overlapping contributions.
    fn col2im_add<T: Scalar>(&self, cols: &[T], y0: usize, y1: usize, image: &mut [T]) {
        let n = (y1 - y0) * self.out_w;
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &cols[row * n..(row + 1) * n];
                    for (band_y, oy) in (y0..y1).enumerate() {
                        if let Some(iy) = self.source(oy, ky, self.height) {
                            let seg = &src[band_y * self.out_w..(band_y + 1) * self.out_w];
                            let dst = &mut plane[iy * self.width..(iy + 1) * self.width];
                            for (ox, &v) in seg.iter().enumerate() {
                                if let Some(ix) = self.source(ox, kx, self.width) {
                                    dst[ix] = dst[ix] + v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn conv_geometry<T: Scalar>(input: Shape4, params: &ConvParams<T>) -> Result<(Geometry, usize), TensorError> {
    let w = params.weight.shape();
    if input.channels != w.channels {
        return Err(TensorError::shape(
            "conv2d",
            format!("input with {} channels for weight {}", w.channels, w),
            format!("input {input}"),
        ));
    }
    params.validate("conv2d", false)?;
    let out_h = conv_output_extent(input.height, w.height, params.stride, params.padding)?;
    let out_w = conv_output_extent(input.width, w.width, params.stride, params.padding)?;
    Ok((
        Geometry {
            channels: input.channels,
            height: input.height,
            width: input.width,
            kh: w.height,
            kw: w.width,
            stride: params.stride,
            pad: params.padding,
            out_h,
            out_w,
        },
        w.batch,
    ))
}

/// Geometry of a transposed convolution, described from the point of view of
/// the output image (the transposed op scatters into it).
fn deconv_geometry<T: Scalar>(input: Shape4, params: &ConvParams<T>) -> Result<(Geometry, usize), TensorError> {
    let w = params.weight.shape();
    if input.channels != w.batch {
        return Err(TensorError::shape(
            "deconv2d",
            format!("input with {} channels for weight {}", w.batch, w),
            format!("input {input}"),
        ));
    }
    params.validate("deconv2d", true)?;
    let height = deconv_output_extent(input.height, w.height, params.stride, params.padding)?;
    let width = deconv_output_extent(input.width, w.width, params.stride, params.padding)?;
    Ok((
        Geometry {
            channels: w.channels,
            height,
            width,
            kh: w.height,
            kw: w.width,
            stride: params.stride,
            pad: params.padding,
            out_h: input.height,
            out_w: input.width,
        },
        w.batch,
    ))
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

fn bias_grad<T: Scalar>(upstream: &[T], channels: usize, plane: usize, acc: &mut [T]) {
    for (c, chunk) in upstream.chunks(plane).take(channels).enumerate() {
        acc[c] = acc[c] + chunk.iter().copied().sum::<T>();
    }
}

/// Sums per-sample partial gradients in sample order.
fn reduce_in_order<T: Scalar>(parts: Vec<(Vec<T>, Vec<T>)>, w_len: usize, b_len: usize) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); w_len];
    let mut db = vec![T::zero(); b_len];
    for (pw, pb) in parts {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a = *a + b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a = *a + b;
        }
    }
    (dw, db)
}

fn expect_upstream(op: &'static str, upstream: &Shape4, expected: Shape4) -> Result<(), TensorError> {
    if *upstream != expected {
        return Err(TensorError::shape(op, expected, *upstream));
    }
    Ok(())
}

/// Cross-correlation with zero padding: `y[o] = b[o] + sum_i w[o, i] * x[i]`.
pub fn conv2d<T: Scalar>(input: &Tensor4<T>, params: &ConvParams<T>) -> Result<Tensor4<T>, TensorError> {
    let s = input.shape();
    let (g, out_c) = conv_geometry(s, params)?;
    let out_shape = Shape4::new(s.batch, out_c, g.out_h, g.out_w);
    let mut out = Tensor4::zeros(out_shape);
    let k = g.patch_len();
    let w = params.weight.data();
    out.data_mut()
        .par_chunks_mut(out_shape.sample_len())
        .zip(input.data().par_chunks(g.image_len()))
        .for_each(|(o, x)| {
            let mut cols = Vec::new();
            for (y0, y1) in g.bands() {
                let n = (y1 - y0) * g.out_w;
                cols.resize(k * n, T::zero());
                g.im2col(x, y0, y1, &mut cols);
                T::gemm(
                    out_c,
                    k,
                    n,
                    T::one(),
                    w,
                    k,
                    1,
                    &cols,
                    n,
                    1,
                    T::zero(),
                    &mut o[y0 * g.out_w..],
                    g.out_plane(),
                    1,
                );
            }
            add_bias(o, &params.bias, g.out_plane());
        });
    Ok(out)
}

fn conv2d_backward_impl<T: Scalar>(
    input: &Tensor4<T>,
    params: &ConvParams<T>,
    upstream: &Tensor4<T>,
    want_params: bool,
) -> Result<ConvGrads<T>, TensorError> {
    let s = input.shape();
    let (g, out_c) = conv_geometry(s, params)?;
    expect_upstream(
        "conv2d_backward",
        &upstream.shape(),
        Shape4::new(s.batch, out_c, g.out_h, g.out_w),
    )?;
    let k = g.patch_len();
    let w = params.weight.data();
    let mut d_input = Tensor4::zeros(s);
    let parts: Vec<(Vec<T>, Vec<T>)> = d_input
        .data_mut()
        .par_chunks_mut(g.image_len())
        .zip(input.data().par_chunks(g.image_len()))
        .zip(upstream.data().par_chunks(out_c * g.out_plane()))
        .map(|((dx, x), dy)| {
            let mut dw = vec![T::zero(); if want_params { w.len() } else { 0 }];
            let mut db = vec![T::zero(); if want_params { out_c } else { 0 }];
            let mut cols = Vec::new();
            let mut dcols = Vec::new();
            for (y0, y1) in g.bands() {
                let n = (y1 - y0) * g.out_w;
                let dy_band = &dy[y0 * g.out_w..];
                if want_params {
                    cols.resize(k * n, T::zero());
                    g.im2col(x, y0, y1, &mut cols);
                    T::gemm(
                        out_c,
                        n,
                        k,
                        T::one(),
                        dy_band,
                        g.out_plane(),
                        1,
                        &cols,
                        1,
                        n,
                        T::one(),
                        &mut dw,
                        k,
                        1,
                    );
                }
                dcols.resize(k * n, T::zero());
                T::gemm(
                    k,
                    out_c,
                    n,
                    T::one(),
                    w,
                    1,
                    k,
                    dy_band,
                    g.out_plane(),
                    1,
                    T::zero(),
                    &mut dcols,
                    n,
                    1,
                );
                g.col2im_add(&dcols, y0, y1, dx);
            }
            if want_params {
                bias_grad(dy, out_c, g.out_plane(), &mut db);
            }
            (dw, db)
        })
        .collect();
    let (dw, db) = if want_params {
        reduce_in_order(parts, w.len(), out_c)
    } else {
        (vec![T::zero(); w.len()], vec![T::zero(); out_c])
    };
    Ok(ConvGrads {
        d_input,
        d_weight: Tensor4::from_vec(params.weight.shape(), dw)?,
        d_bias: db,
    })
}

/// Gradients of [`conv2d`] given the upstream gradient of its output.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    params: &ConvParams<T>,
    upstream: &Tensor4<T>,
) -> Result<ConvGrads<T>, TensorError> {
    conv2d_backward_impl(input, params, upstream, true)
}

/// Input gradient of [`conv2d`] only, for frozen layers.
pub fn conv2d_backward_input<T: Scalar>(
    input: &Tensor4<T>,
    params: &ConvParams<T>,
    upstream: &Tensor4<T>,
) -> Result<Tensor4<T>, TensorError> {
    Ok(conv2d_backward_impl(input, params, upstream, false)?.d_input)
}

/// Transposed convolution: every input pixel scatters a weighted kernel
/// footprint into the output, `stride` pixels apart.
pub fn deconv2d<T: Scalar>(input: &Tensor4<T>, params: &ConvParams<T>) -> Result<Tensor4<T>, TensorError> {
    let s = input.shape();
    let (g, in_c) = deconv_geometry(s, params)?;
    let out_shape = Shape4::new(s.batch, g.channels, g.height, g.width);
    let mut out = Tensor4::zeros(out_shape);
    let rows = g.patch_len();
    let w = params.weight.data();
    out.data_mut()
        .par_chunks_mut(out_shape.sample_len())
        .zip(input.data().par_chunks(s.sample_len()))
        .for_each(|(o, x)| {
            let mut cols = Vec::new();
            for (y0, y1) in g.bands() {
                let n = (y1 - y0) * g.out_w;
                cols.resize(rows * n, T::zero());
                T::gemm(
                    rows,
                    in_c,
                    n,
                    T::one(),
                    w,
                    1,
                    rows,
                    &x[y0 * g.out_w..],
                    g.out_plane(),
                    1,
                    T::zero(),
                    &mut cols,
                    n,
                    1,
                );
                g.col2im_add(&cols, y0, y1, o);
            }
            add_bias(o, &params.bias, g.height * g.width);
        });
    Ok(out)
}

fn deconv2d_backward_impl<T: Scalar>(
    input: &Tensor4<T>,
    params: &ConvParams<T>,
    upstream: &Tensor4<T>,
    want_params: bool,
) -> Result<ConvGrads<T>, TensorError> {
    let s = input.shape();
    let (g, in_c) = deconv_geometry(s, params)?;
    expect_upstream(
        "deconv2d_backward",
        &upstream.shape(),
        Shape4::new(s.batch, g.channels, g.height, g.width),
    )?;
    let rows = g.patch_len();
    let w = params.weight.data();
    let out_c = g.channels;
    let mut d_input = Tensor4::zeros(s);
    let parts: Vec<(Vec<T>, Vec<T>)> = d_input
        .data_mut()
        .par_chunks_mut(s.sample_len())
        .zip(input.data().par_chunks(s.sample_len()))
        .zip(upstream.data().par_chunks(g.image_len()))
        .map(|((dx, x), dy)| {
            let mut dw = vec![T::zero(); if want_params { w.len() } else { 0 }];
            let mut db = vec![T::zero(); if want_params { out_c } else { 0 }];
            let mut dcols = Vec::new();
            for (y0, y1) in g.bands() {
                let n = (y1 - y0) * g.out_w;
                dcols.resize(rows * n, T::zero());
                g.im2col(dy, y0, y1, &mut dcols);
                T::gemm(
                    in_c,
                    rows,
                    n,
                    T::one(),
                    w,
                    rows,
                    1,
                    &dcols,
                    n,
                    1,
                    T::zero(),
                    &mut dx[y0 * g.out_w..],
                    g.out_plane(),
                    1,
                );
                if want_params {
                    T::gemm(
                        in_c,
                        n,
                        rows,
                        T::one(),
                        &x[y0 * g.out_w..],
                        g.out_plane(),
                        1,
                        &dcols,
                        1,
                        n,
                        T::one(),
                        &mut dw,
                        rows,
                        1,
                    );
                }
            }
            if want_params {
                bias_grad(dy, out_c, g.height * g.width, &mut db);
            }
            (dw, db)
        })
        .collect();
    let (dw, db) = if want_params {
        reduce_in_order(parts, w.len(), out_c)
    } else {
        (vec![T::zero(); w.len()], vec![T::zero(); out_c])
    };
    Ok(ConvGrads {
        d_input,
        d_weight: Tensor4::from_vec(params.weight.shape(), dw)?,
        d_bias: db,
    })
}

/// Gradients of [`deconv2d`] given the upstream gradient of its output.
pub fn deconv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    params: &ConvParams<T>,
    upstream: &Tensor4<T>,
) -> Result<ConvGrads<T>, TensorError> {
    deconv2d_backward_impl(input, params, upstream, true)
}

pub fn deconv2d_backward_input<T: Scalar>(
    input: &Tensor4<T>,
    params: &ConvParams<T>,
    upstream: &Tensor4<T>,
) -> Result<Tensor4<T>, TensorError> {
    Ok(deconv2d_backward_impl(input, params, upstream, false)?.d_input)
}
