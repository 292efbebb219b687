//! Central finite-difference gradient checks.
//!
//! A check compares an analytic gradient against central differences for
//! every probed coordinate and reports the worst relative error
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)`, where
//! `floor = max(1e-8, RELATIVE_FLOOR * max_i |analytic_i|)` over the argument.
//! The floor matters for components many orders of magnitude below the rest
//! of the gradient: there the difference quotient is limited by rounding in
//! `f` (about `eps |f| / h`), not by the gradient being wrong. Smooth
//! objectives use the five-point stencil
//! `(f(x - 2h) - 8 f(x - h) + 8 f(x + h) - f(x + 2h)) / 12h`, whose O(h^4)
//! truncation error stays far below the tolerances even where a gradient
//! component is close to zero; piecewise-smooth objectives use
//! `(f(x + h) - f(x - h)) / 2h` and skip probes that straddle a kink.
//! Checks run in double precision.
//!
//! Layer ops are reduced to a scalar by contracting their output with a fixed
//! random upstream tensor, so the analytic side is exactly the op's backward
//! pass applied to that upstream.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    activation, activation_backward, batchnorm, batchnorm_backward, conv2d, conv2d_backward, deconv2d,
    deconv2d_backward, Activation, BnMode, BnParams, ConvParams, Shape4, Tensor4, TensorError,
};

pub const DEFAULT_STEP: f64 = 1e-3;

/// Relative-error denominators never drop below this fraction of the
/// argument's largest analytic gradient component.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Which coordinates a check perturbs.
#[derive(Clone, Debug)]
pub enum Probes {
    All,
    /// `count` coordinates per argument, drawn without replacement. Piecewise
    /// checks keep drawing until `count` coordinates away from kinks are compared.
    Sample {
        count: usize,
        seed: u64,
    },
}

/// Coordinates to try, in order, and how many of them to compare.
fn probe_order(probes: &Probes, arg: usize, len: usize) -> (Vec<usize>, usize) {
    match *probes {
        Probes::All => ((0..len).collect(), len),
        Probes::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (arg as u64).wrapping_mul(0x9E37_79B9));
            let mut order: Vec<usize> = (0..len).collect();
            order.shuffle(&mut rng);
            (order, count.min(len))
        }
    }
}

/// Maximum relative error between `analytic` and central differences of
/// `objective` over `args`.
///
/// `analytic[i]` must have the length of `args[i]`; an empty `analytic[i]`
/// skips that argument.
pub fn grad_check<F>(
    op: &str,
    args: &[Vec<f64>],
    analytic: &[Vec<f64>],
    step: f64,
    probes: &Probes,
    mut objective: F,
) -> Result<f64, TensorError>
where
    F: FnMut(&[Vec<f64>]) -> Result<f64, TensorError>,
{
    let report = run_check(op, args, analytic, step, probes, true, |a| {
        Ok((objective(a)?, Vec::new()))
    })?;
    Ok(report.max_rel_error)
}

/// [`grad_check`] returning the full report.
pub fn grad_check_report<F>(
    op: &str,
    args: &[Vec<f64>],
    analytic: &[Vec<f64>],
    step: f64,
    probes: &Probes,
    mut objective: F,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&[Vec<f64>]) -> Result<f64, TensorError>,
{
    run_check(op, args, analytic, step, probes, true, |a| {
        Ok((objective(a)?, Vec::new()))
    })
}

/// Outcome of [`grad_check_report`] and [`grad_check_piecewise`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub skipped: usize,
}

/// [`grad_check`] for piecewise-smooth objectives. The objective also returns
/// its kink pattern (for instance the signs of every ReLU input); a probe whose
/// `x + h` or `x - h` pattern differs from the unperturbed one straddles a
/// kink, where central differences are not an estimate of the gradient, and
/// is skipped.
pub fn grad_check_piecewise<F>(
    op: &str,
    args: &[Vec<f64>],
    analytic: &[Vec<f64>],
    step: f64,
    probes: &Probes,
    objective: F,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&[Vec<f64>]) -> Result<(f64, Vec<bool>), TensorError>,
{
    run_check(op, args, analytic, step, probes, false, objective)
}

fn run_check<F>(
    op: &str,
    args: &[Vec<f64>],
    analytic: &[Vec<f64>],
    step: f64,
    probes: &Probes,
    five_point: bool,
    mut objective: F,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&[Vec<f64>]) -> Result<(f64, Vec<bool>), TensorError>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(TensorError::config(
            "grad_check",
            format!("step must be positive, got {step}"),
        ));
    }
    if args.len() != analytic.len() {
        return Err(TensorError::shape(
            "grad_check",
            format!("{} analytic gradients", args.len()),
            format!("{}", analytic.len()),
        ));
    }
    let non_finite = |arg, index| TensorError::NonFinite {
        op: op.to_string(),
        arg,
        index,
    };
    for (arg, values) in args.iter().enumerate() {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(non_finite(arg, index));
        }
    }
    let (_, base_pattern) = objective(args)?;
    let mut work = args.to_vec();
    let mut report = GradCheckReport::default();
    for (arg, grad) in analytic.iter().enumerate() {
        if grad.is_empty() {
            continue;
        }
        if grad.len() != args[arg].len() {
            return Err(TensorError::shape(
                "grad_check",
                format!("gradient of length {}", args[arg].len()),
                format!("{}", grad.len()),
            ));
        }
        let (order, wanted) = probe_order(probes, arg, grad.len());
        let floor = (RELATIVE_FLOOR * grad.iter().fold(0.0f64, |m, g| m.max(g.abs()))).max(1e-8);
        let mut compared = 0;
        for index in order {
            if compared == wanted {
                break;
            }
            let original = work[arg][index];
            let offsets: &[(f64, f64)] = if five_point {
                &[(2.0, -1.0), (1.0, 8.0), (-1.0, -8.0), (-2.0, 1.0)]
            } else {
                &[(1.0, 1.0), (-1.0, -1.0)]
            };
            let mut acc = 0.0;
            let mut straddles = false;
            for &(k, coef) in offsets {
                work[arg][index] = original + k * step;
                let (value, pattern) = objective(&work)?;
                straddles |= pattern != base_pattern;
                acc += coef * value;
            }
            work[arg][index] = original;
            if straddles {
                report.skipped += 1;
                continue;
            }
            let numeric = acc / if five_point { 12.0 * step } else { 2.0 * step };
            let a = grad[index];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(non_finite(arg, index));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
            compared += 1;
        }
    }
    Ok(report)
}

fn random_tensor(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn conv_from_args(
    args: &[Vec<f64>],
    w_shape: Shape4,
    stride: usize,
    padding: usize,
    transposed: bool,
) -> Result<ConvParams<f64>, TensorError> {
    let weight = Tensor4::from_vec(w_shape, args[1].clone())?;
    if transposed {
        ConvParams::new_transposed(weight, args[2].clone(), stride, padding)
    } else {
        ConvParams::new(weight, args[2].clone(), stride, padding)
    }
}

/// Checks `conv2d` on a random `2x3x8x8` input with four `3x3` filters.
pub fn check_conv2d(seed: u64, step: f64) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stride = if seed.is_multiple_of(2) { 1 } else { 2 };
    let x = random_tensor(Shape4::new(2, 3, 8, 8), &mut rng);
    let w_shape = Shape4::new(4, 3, 3, 3);
    let params = ConvParams::new(
        random_tensor(w_shape, &mut rng),
        (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
        stride,
        1,
    )?;
    let y = conv2d(&x, &params)?;
    let upstream = random_tensor(y.shape(), &mut rng);
    let g = conv2d_backward(&x, &params, &upstream)?;
    let args = vec![x.data().to_vec(), params.weight.data().to_vec(), params.bias.clone()];
    let analytic = vec![g.d_input.into_vec(), g.d_weight.into_vec(), g.d_bias];
    grad_check("conv2d", &args, &analytic, step, &Probes::All, |a| {
        let x = Tensor4::from_vec(x.shape(), a[0].clone())?;
        let p = conv_from_args(a, w_shape, stride, 1, false)?;
        Ok(dot(&conv2d(&x, &p)?, &upstream))
    })
}

/// Checks `deconv2d` (stride 2, 4x4 kernel, padding 1) on a random `1x2x5x5` input.
pub fn check_deconv2d(seed: u64, step: f64) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(Shape4::new(1, 2, 5, 5), &mut rng);
    let w_shape = Shape4::new(2, 3, 4, 4);
    let params = ConvParams::new_transposed(
        random_tensor(w_shape, &mut rng),
        (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        2,
        1,
    )?;
    let y = deconv2d(&x, &params)?;
    let upstream = random_tensor(y.shape(), &mut rng);
    let g = deconv2d_backward(&x, &params, &upstream)?;
    let args = vec![x.data().to_vec(), params.weight.data().to_vec(), params.bias.clone()];
    let analytic = vec![g.d_input.into_vec(), g.d_weight.into_vec(), g.d_bias];
    grad_check("deconv2d", &args, &analytic, step, &Probes::All, |a| {
        let x = Tensor4::from_vec(x.shape(), a[0].clone())?;
        let p = conv_from_args(a, w_shape, 2, 1, true)?;
        Ok(dot(&deconv2d(&x, &p)?, &upstream))
    })
}

/// Checks `batchnorm` gradients with respect to input, gamma and beta.
pub fn check_batchnorm(seed: u64, mode: BnMode, step: f64) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor4::from_fn(Shape4::new(2, 3, 4, 4), |_| rng.random_range(-2.0..2.0));
    let mut params = BnParams::<f64>::new(3);
    params.gamma = (0..3).map(|_| rng.random_range(0.5..1.5)).collect();
    params.beta = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
    params.running_mean = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
    params.running_var = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();
    let fwd = batchnorm(&x, &params, mode)?;
    let upstream = random_tensor(x.shape(), &mut rng);
    let g = batchnorm_backward(&fwd.cache, &params, &upstream)?;
    let args = vec![x.data().to_vec(), params.gamma.clone(), params.beta.clone()];
    let analytic = vec![g.d_input.into_vec(), g.d_gamma, g.d_beta];
    grad_check("batchnorm", &args, &analytic, step, &Probes::All, |a| {
        let x = Tensor4::from_vec(x.shape(), a[0].clone())?;
        let mut p = params.clone();
        p.gamma = a[1].clone();
        p.beta = a[2].clone();
        Ok(dot(&batchnorm(&x, &p, mode)?.output, &upstream))
    })
}

/// Checks an activation on inputs kept at least `0.01 + step` away from the
/// kink at zero.
pub fn check_activation(seed: u64, kind: Activation, step: f64) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = 1e-2 + step;
    let x = Tensor4::from_fn(Shape4::new(2, 2, 3, 3), |_| {
        let mag = rng.random_range(margin..3.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    });
    let y = activation(&x, kind);
    let upstream = random_tensor(x.shape(), &mut rng);
    let g = activation_backward(&x, &y, kind, &upstream)?;
    grad_check(
        "activation",
        &[x.data().to_vec()],
        &[g.into_vec()],
        step,
        &Probes::All,
        |a| {
            let x = Tensor4::from_vec(x.shape(), a[0].clone())?;
            Ok(dot(&activation(&x, kind), &upstream))
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact_to_rounding() {
        // 1x1 convolution is linear in both input and weights.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(Shape4::new(1, 2, 3, 3), &mut rng);
        let w_shape = Shape4::new(2, 2, 1, 1);
        let p = ConvParams::new(random_tensor(w_shape, &mut rng), vec![0.3, -0.1], 1, 0).unwrap();
        let up = random_tensor(Shape4::new(1, 2, 3, 3), &mut rng);
        let g = conv2d_backward(&x, &p, &up).unwrap();
        let err = grad_check(
            "conv1x1",
            &[x.data().to_vec()],
            &[g.d_input.into_vec()],
            DEFAULT_STEP,
            &Probes::All,
            |a| {
                let x = Tensor4::from_vec(x.shape(), a[0].clone())?;
                Ok(dot(&conv2d(&x, &p)?, &up))
            },
        )
        .unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn nan_objective_reports_op_and_argument() {
        let err = grad_check(
            "broken",
            &[vec![1.0, 2.0]],
            &[vec![0.0, 0.0]],
            1e-3,
            &Probes::All,
            |a| Ok(if a[0][1] != 2.0 { f64::NAN } else { 0.0 }),
        )
        .unwrap_err();
        assert_eq!(
            err,
            TensorError::NonFinite {
                op: "broken".into(),
                arg: 0,
                index: 1
            }
        );
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = grad_check("square", &[vec![3.0]], &[vec![5.0]], 1e-3, &Probes::All, |a| {
            Ok(a[0][0] * a[0][0])
        })
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn sampled_probes_are_deterministic_and_bounded() {
        let a = probe_order(&Probes::Sample { count: 5, seed: 1 }, 0, 100);
        let b = probe_order(&Probes::Sample { count: 5, seed: 1 }, 0, 100);
        assert_eq!(a, b);
        assert_eq!(a.1, 5);
        assert_eq!(probe_order(&Probes::Sample { count: 50, seed: 1 }, 0, 10).1, 10);
    }

    #[test]
    fn kink_straddling_probes_are_skipped() {
        // |x| has a kink at 0; the probe at 0.0005 straddles it with step 1e-3.
        let x = vec![0.0005, 0.7, -0.4];
        let g: Vec<f64> = x.iter().map(|v: &f64| v.signum()).collect();
        let report = grad_check_piecewise("abs", &[x], &[g], 1e-3, &Probes::All, |a| {
            Ok((
                a[0].iter().map(|v| v.abs()).sum(),
                a[0].iter().map(|v| *v > 0.0).collect(),
            ))
        })
        .unwrap();
        assert_eq!((report.checked, report.skipped), (2, 1));
        assert!(report.max_rel_error < 1e-12);
    }

    #[test]
    fn op_suites_pass_on_a_few_seeds() {
        for seed in 0..3 {
            assert!(check_conv2d(seed, DEFAULT_STEP).unwrap() <= 1e-4);
            assert!(check_deconv2d(seed, DEFAULT_STEP).unwrap() <= 1e-4);
            assert!(check_batchnorm(seed, BnMode::Train, DEFAULT_STEP).unwrap() <= 1e-4);
            assert!(check_batchnorm(seed, BnMode::Infer, DEFAULT_STEP).unwrap() <= 1e-4);
            assert!(check_activation(seed, Activation::LeakyRelu(0.2), DEFAULT_STEP).unwrap() <= 1e-5);
            assert!(check_activation(seed, Activation::Tanh, DEFAULT_STEP).unwrap() <= 1e-4);
            assert!(check_activation(seed, Activation::Sigmoid, DEFAULT_STEP).unwrap() <= 1e-4);
            assert!(check_activation(seed, Activation::Relu, DEFAULT_STEP).unwrap() <= 1e-5);
        }
    }
}
