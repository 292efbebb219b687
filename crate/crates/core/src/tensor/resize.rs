use super::{Scalar, Shape4, Tensor4, TensorError};

/// Cubic convolution kernel with `a = -0.5`.
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// For each destination index, the four clamped source taps and weights.
fn taps(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let center = (d as f64 + 0.5) * scale - 0.5;
            let base = center.floor();
            let frac = center - base;
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let pos = base as isize - 1 + k as isize;
                idx[k] = pos.clamp(0, src as isize - 1) as usize;
                w[k] = cubic(frac - (k as f64 - 1.0));
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic resampling to `height x width` with half-pixel centers
/// and edge clamping. Values may overshoot the input range slightly.
pub fn upsample_bicubic<T: Scalar>(input: &Tensor4<T>, height: usize, width: usize) -> Result<Tensor4<T>, TensorError> {
    let s = input.shape();
    if height == 0 || width == 0 || s.height == 0 || s.width == 0 {
        return Err(TensorError::config(
            "upsample_bicubic",
            format!("cannot resample {s} to {height}x{width}"),
        ));
    }
    let tx = taps(s.width, width);
    let ty = taps(s.height, height);
    let out_shape = Shape4::new(s.batch, s.channels, height, width);
    let mut out = Tensor4::zeros(out_shape);
    let mut rows = vec![0.0f64; s.height * width];
    for (plane_in, plane_out) in input
        .data()
        .chunks(s.plane())
        .zip(out.data_mut().chunks_mut(height * width))
    {
        for y in 0..s.height {
            let src = &plane_in[y * s.width..(y + 1) * s.width];
            for (x, (idx, w)) in tx.iter().enumerate() {
                rows[y * width + x] = (0..4).map(|k| src[idx[k]].as_f64() * w[k]).sum();
            }
        }
        for (y, (idx, w)) in ty.iter().enumerate() {
            for x in 0..width {
                let v: f64 = (0..4).map(|k| rows[idx[k] * width + x] * w[k]).sum();
                plane_out[y * width + x] = T::cast_from(v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let x = Tensor4::<f32>::filled(Shape4::new(1, 3, 4, 5), 0.25);
        let y = upsample_bicubic(&x, 16, 20).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn linear_ramp_is_reproduced_in_the_interior() {
        let x = Tensor4::<f64>::from_fn(Shape4::new(1, 1, 1, 8), |i| i as f64);
        let y = upsample_bicubic(&x, 1, 16).unwrap();
        // Destination pixel d samples source position (d + 0.5) / 2 - 0.5.
        for d in 4..12 {
            let expect = (d as f64 + 0.5) / 2.0 - 0.5;
            assert!((y.at(0, 0, 0, d) - expect).abs() < 1e-12);
        }
    }
}
