//! Generator and discriminator objectives.
//!
//! Every image loss takes tensors in `[-1, 1]`, reduces each sample to a
//! scalar and averages over the batch. The `*_with_grad` forms also return
//! the gradient with respect to the generated batch.

pub mod check;
mod extractor;

pub use extractor::{
    build_feature_extractor, ExtractorSource, FeatureExtractor, DEFAULT_EXTRACTOR_SEED, DEFAULT_EXTRACTOR_WIDTH,
};

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor4, TensorError};

/// Lower clamp applied inside every logarithm of the adversarial terms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Weights of the combined generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_p: f64,
    pub lambda_2: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 1e-2,
            lambda_p: 1e-3,
            lambda_2: 1.0,
            lambda_adv: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_c: f64, lambda_p: f64, lambda_2: f64, lambda_adv: f64) -> Self {
        LossWeights {
            lambda_c,
            lambda_p,
            lambda_2,
            lambda_adv,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_p", self.lambda_p),
            ("lambda_2", self.lambda_2),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TensorError::config(
                    "loss_weights",
                    format!("{name} must be finite and non-negative, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

fn expect_pair<T: Scalar>(op: &'static str, generated: &Tensor4<T>, target: &Tensor4<T>) -> Result<(), TensorError> {
    generated.expect_same_shape(op, target)?;
    if generated.shape().batch == 0 {
        return Err(TensorError::config(op, "empty batch"));
    }
    Ok(())
}

/// Per-sample Euclidean norm of `a - b`, averaged over the batch, with the
/// gradient with respect to `a`. A zero difference has zero gradient.
fn mean_norm_with_grad<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> (f64, Tensor4<T>) {
    let s = a.shape();
    let batch = s.batch as f64;
    let mut grad = Tensor4::zeros(s);
    let mut total = 0.0;
    for n in 0..s.batch {
        let (x, y) = (a.sample(n), b.sample(n));
        let norm = x
            .iter()
            .zip(y)
            .map(|(&p, &q)| {
                let d = (p - q).as_f64();
                d * d
            })
            .sum::<f64>()
            .sqrt();
        total += norm;
        if norm > 0.0 {
            let scale = 1.0 / (norm * batch);
            for ((g, &p), &q) in grad.sample_mut(n).iter_mut().zip(x).zip(y) {
                *g = T::cast_from((p - q).as_f64() * scale);
            }
        }
    }
    (total / batch, grad)
}

/// Global similarity: `||target - generated||_2` per image, batch mean.
pub fn global_similarity_loss<T: Scalar>(generated: &Tensor4<T>, target: &Tensor4<T>) -> Result<f64, TensorError> {
    Ok(global_similarity_with_grad(generated, target)?.0)
}

pub fn global_similarity_with_grad<T: Scalar>(
    generated: &Tensor4<T>,
    target: &Tensor4<T>,
) -> Result<(f64, Tensor4<T>), TensorError> {
    expect_pair("global_similarity_loss", generated, target)?;
    Ok(mean_norm_with_grad(generated, target))
}

/// Per-pixel redmean colour disparity
/// `s = (512 + r_mean) r^2 + 4 g^2 + (767 - r_mean) b^2`, where `r, g, b` are
/// channel differences on the `[0, 1]` scale and `r_mean` is the mean of the
/// two red values on the `[0, 255]` scale. Each image contributes the
/// root-mean-square of `s` over its pixels; the batch mean is returned.
pub fn perceptual_redmean_loss<T: Scalar>(generated: &Tensor4<T>, target: &Tensor4<T>) -> Result<f64, TensorError> {
    Ok(perceptual_redmean_with_grad(generated, target)?.0)
}

pub fn perceptual_redmean_with_grad<T: Scalar>(
    generated: &Tensor4<T>,
    target: &Tensor4<T>,
) -> Result<(f64, Tensor4<T>), TensorError> {
    expect_pair("perceptual_redmean_loss", generated, target)?;
    let s = generated.shape();
    if s.channels != 3 {
        return Err(TensorError::shape("perceptual_redmean_loss", "3-channel images", s));
    }
    let plane = s.plane();
    let batch = s.batch as f64;
    let mut grad = Tensor4::zeros(s);
    let mut total = 0.0;
    let unit = |v: T| (v.as_f64() + 1.0) * 0.5;
    for n in 0..s.batch {
        let (gen, tgt) = (generated.sample(n), target.sample(n));
        // s per pixel, and its partial derivatives w.r.t. the generated
        // [0, 1]-scale channels.
        let mut disparity = Vec::with_capacity(plane);
        let mut partials = Vec::with_capacity(plane);
        for p in 0..plane {
            let (gr, gg, gb) = (unit(gen[p]), unit(gen[plane + p]), unit(gen[2 * plane + p]));
            let (tr, tg, tb) = (unit(tgt[p]), unit(tgt[plane + p]), unit(tgt[2 * plane + p]));
            let (r, g, b) = (gr - tr, gg - tg, gb - tb);
            let r_mean = 255.0 * (gr + tr) * 0.5;
            disparity.push((512.0 + r_mean) * r * r + 4.0 * g * g + (767.0 - r_mean) * b * b);
            partials.push([
                2.0 * (512.0 + r_mean) * r + 127.5 * (r * r - b * b),
                8.0 * g,
                2.0 * (767.0 - r_mean) * b,
            ]);
        }
        let rms = (disparity.iter().map(|v| v * v).sum::<f64>() / plane as f64).sqrt();
        total += rms;
        if rms > 0.0 {
            let out = grad.sample_mut(n);
            for (p, (&sv, d)) in disparity.iter().zip(&partials).enumerate() {
                // d rms / d s_p = s_p / (P rms); d unit / d x = 1/2.
                let k = sv / (plane as f64 * rms * batch) * 0.5;
                for (c, &dc) in d.iter().enumerate() {
                    out[c * plane + p] = T::cast_from(k * dc);
                }
            }
        }
    }
    Ok((total / batch, grad))
}

/// Content loss: `||phi(target) - phi(generated)||_2` per image, batch mean.
pub fn content_loss<T: Scalar>(
    extractor: &FeatureExtractor<T>,
    generated: &Tensor4<T>,
    target: &Tensor4<T>,
) -> Result<f64, TensorError> {
    expect_pair("content_loss", generated, target)?;
    let a = extractor.features(generated)?;
    let b = extractor.features(target)?;
    Ok(mean_norm_with_grad(&a, &b).0)
}

/// Content loss and its gradient; the gradient flows through `generated` only.
pub fn content_with_grad<T: Scalar>(
    extractor: &FeatureExtractor<T>,
    generated: &Tensor4<T>,
    target: &Tensor4<T>,
) -> Result<(f64, Tensor4<T>), TensorError> {
    expect_pair("content_loss", generated, target)?;
    let target_features = extractor.features(target)?;
    let mut value = 0.0;
    let grad = extractor.input_gradient(generated, |features| {
        let (v, g) = mean_norm_with_grad(features, &target_features);
        value = v;
        Ok(g)
    })?;
    Ok((value, grad))
}

fn check_probabilities<T: Scalar>(op: &'static str, map: &Tensor4<T>) -> Result<(), TensorError> {
    if map.is_empty() {
        return Err(TensorError::config(op, "empty validity map"));
    }
    if let Some(v) = map.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(TensorError::config(op, format!("validity value {v} outside [0, 1]")));
    }
    Ok(())
}

/// `-mean(log(max(v, floor)))` and its gradient.
fn neg_mean_log<T: Scalar>(map: &Tensor4<T>, complement: bool) -> (f64, Tensor4<T>) {
    let m = map.len() as f64;
    let mut grad = Tensor4::zeros(map.shape());
    let mut acc = 0.0;
    for (g, &v) in grad.data_mut().iter_mut().zip(map.data()) {
        let sign = if complement { -1.0 } else { 1.0 };
        let arg = if complement { 1.0 - v.as_f64() } else { v.as_f64() };
        if arg > LOG_FLOOR {
            acc -= arg.ln();
            *g = T::cast_from(-sign / (arg * m));
        } else {
            acc -= LOG_FLOOR.ln();
        }
    }
    (acc / m, grad)
}

/// Adversarial losses from discriminator outputs on real and fake pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialLoss<T = f32> {
    /// `-mean(log D(real)) - mean(log(1 - D(fake)))`.
    pub d_loss: f64,
    /// Non-saturating generator term `-mean(log D(fake))`.
    pub g_adv_loss: f64,
    pub d_loss_wrt_real: Tensor4<T>,
    pub d_loss_wrt_fake: Tensor4<T>,
}

pub fn adversarial_pair_loss<T: Scalar>(
    real_map: &Tensor4<T>,
    fake_map: &Tensor4<T>,
) -> Result<(f64, f64), TensorError> {
    let l = adversarial_pair_with_grad(real_map, fake_map)?;
    Ok((l.d_loss, l.g_adv_loss))
}

pub fn adversarial_pair_with_grad<T: Scalar>(
    real_map: &Tensor4<T>,
    fake_map: &Tensor4<T>,
) -> Result<AdversarialLoss<T>, TensorError> {
    check_probabilities("adversarial_pair_loss", real_map)?;
    check_probabilities("adversarial_pair_loss", fake_map)?;
    let (real_term, d_real) = neg_mean_log(real_map, false);
    let (fake_term, d_fake) = neg_mean_log(fake_map, true);
    let (g_adv_loss, _) = neg_mean_log(fake_map, false);
    Ok(AdversarialLoss {
        d_loss: real_term + fake_term,
        g_adv_loss,
        d_loss_wrt_real: d_real,
        d_loss_wrt_fake: d_fake,
    })
}

/// Non-saturating generator adversarial term and its gradient with respect
/// to the fake validity map.
pub fn generator_adversarial_with_grad<T: Scalar>(fake_map: &Tensor4<T>) -> Result<(f64, Tensor4<T>), TensorError> {
    check_probabilities("generator_adversarial_loss", fake_map)?;
    Ok(neg_mean_log(fake_map, false))
}

/// Values of every term of the generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub content: f64,
    pub perceptual: f64,
    pub global: f64,
    /// Present in adversarial mode only.
    pub adversarial: Option<f64>,
    pub total: f64,
}

/// Generator objective value with gradients.
#[derive(Clone, Debug)]
pub struct GeneratorLoss<T = f32> {
    pub terms: LossTerms,
    /// Gradient of the total with respect to the generated batch, excluding
    /// the adversarial term (which flows through the discriminator).
    pub d_generated: Tensor4<T>,
    /// Gradient of the total with respect to the validity map, in adversarial mode.
    pub d_validity: Option<Tensor4<T>>,
}

/// `lambda_c L_C + lambda_p L_P + lambda_2 L_2`, plus
/// `lambda_adv * -mean(log D(X, G(X)))` when a validity map is given.
///
/// Terms with a zero weight are still reported but contribute no gradient.
pub fn generator_total_loss<T: Scalar>(
    weights: &LossWeights,
    extractor: &FeatureExtractor<T>,
    generated: &Tensor4<T>,
    target: &Tensor4<T>,
    validity_map: Option<&Tensor4<T>>,
) -> Result<GeneratorLoss<T>, TensorError> {
    weights.validate()?;
    expect_pair("generator_total_loss", generated, target)?;
    let mut d_generated = Tensor4::zeros(generated.shape());
    let mut terms = LossTerms::default();

    let (global, g2) = global_similarity_with_grad(generated, target)?;
    terms.global = global;
    if weights.lambda_2 > 0.0 {
        d_generated.add_scaled(&g2, T::cast_from(weights.lambda_2))?;
    }

    let (perceptual, gp) = perceptual_redmean_with_grad(generated, target)?;
    terms.perceptual = perceptual;
    if weights.lambda_p > 0.0 {
        d_generated.add_scaled(&gp, T::cast_from(weights.lambda_p))?;
    }

    if weights.lambda_c > 0.0 {
        let (content, gc) = content_with_grad(extractor, generated, target)?;
        terms.content = content;
        d_generated.add_scaled(&gc, T::cast_from(weights.lambda_c))?;
    } else {
        terms.content = content_loss(extractor, generated, target)?;
    }

    terms.total =
        weights.lambda_c * terms.content + weights.lambda_p * terms.perceptual + weights.lambda_2 * terms.global;

    let d_validity = match validity_map {
        Some(map) => {
            let (adv, mut g) = generator_adversarial_with_grad(map)?;
            terms.adversarial = Some(adv);
            terms.total += weights.lambda_adv * adv;
            let scale = T::cast_from(weights.lambda_adv);
            for v in g.data_mut() {
                *v = *v * scale;
            }
            Some(g)
        }
        None => None,
    };
    Ok(GeneratorLoss {
        terms,
        d_generated,
        d_validity,
    })
}
