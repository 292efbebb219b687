use super::{Scalar, Tensor4, TensorError};

/// Elementwise non-linearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// Leaky ReLU with the given negative slope.
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu(a) => {
                if x > T::zero() {
                    x
                } else {
                    T::cast_from(a) * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at input `x` with output `y = apply(x)`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(a) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::cast_from(a)
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    // Split by sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Scalar>(input: &Tensor4<T>, kind: Activation) -> Tensor4<T> {
    input.map(|v| kind.apply(v))
}

/// Gradient of [`activation`]; `output` is the forward result for `input`.
pub fn activation_backward<T: Scalar>(
    input: &Tensor4<T>,
    output: &Tensor4<T>,
    kind: Activation,
    upstream: &Tensor4<T>,
) -> Result<Tensor4<T>, TensorError> {
    input.expect_same_shape("activation_backward", output)?;
    input.expect_same_shape("activation_backward", upstream)?;
    let data = input
        .data()
        .iter()
        .zip(output.data())
        .zip(upstream.data())
        .map(|((&x, &y), &g)| g * kind.derivative(x, y))
        .collect();
    Tensor4::from_vec(input.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn relu_values() {
        assert_eq!(Activation::Relu.apply(-1.0f32), 0.0);
        assert_eq!(Activation::Relu.apply(2.0f32), 2.0);
    }

    #[test]
    fn tanh_at_zero() {
        let y = Activation::Tanh.apply(0.0f64);
        assert_eq!(y, 0.0);
        assert_eq!(Activation::Tanh.derivative(0.0, y), 1.0);
    }

    #[test]
    fn ranges() {
        let x = Tensor4::<f64>::from_fn(Shape4::new(1, 1, 1, 41), |i| (i as f64 - 20.0) * 5.0);
        let t = activation(&x, Activation::Tanh);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let s = activation(&x.map(|v| v / 20.0), Activation::Sigmoid);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(activation(&x, Activation::Sigmoid).is_finite());
    }

    #[test]
    fn leaky_slope() {
        let a = Activation::LeakyRelu(Activation::DEFAULT_LEAKY_SLOPE);
        assert!((a.apply(-2.0f64) + 0.4).abs() < 1e-15);
        assert_eq!(a.derivative(-2.0f64, -0.4), 0.2);
    }
}
