//! Finite-difference checks of the loss gradients, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    adversarial_pair_with_grad, build_feature_extractor, content_with_grad, generator_adversarial_with_grad,
    generator_total_loss, global_similarity_with_grad, mean_norm_with_grad, perceptual_redmean_with_grad,
    ExtractorSource, FeatureExtractor, LossWeights,
};
use crate::model::{build_discriminator, build_generator, condition_from_lr, DiscriminatorConfig, GeneratorConfig};
use crate::tensor::gradcheck::{grad_check, grad_check_report, GradCheckReport, Probes};
use crate::tensor::{BnMode, Shape4, Tensor4, TensorError};

/// A single loss term under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Global,
    Redmean,
    Content,
    /// Discriminator loss with respect to the real and fake maps.
    Adversarial,
}

fn image(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.random_range(-0.95..0.95))
}

fn seeded_extractor(seed: u64) -> FeatureExtractor<f64> {
    build_feature_extractor(&ExtractorSource::Seeded(seed))
        .expect("seeded extractor always builds")
        .cast()
}

/// Input coordinates probed by the content-term check.
pub const CONTENT_PROBES: usize = 96;

/// Checks one loss term's gradient on a random `2x3x8x8` pair.
pub fn check_loss_term(term: LossTerm, seed: u64, step: f64) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape4::new(2, 3, 8, 8);
    if term == LossTerm::Adversarial {
        let map_shape = Shape4::new(2, 1, 2, 2);
        let real = Tensor4::from_fn(map_shape, |_| rng.random_range(0.05..0.95));
        let fake = Tensor4::from_fn(map_shape, |_| rng.random_range(0.05..0.95));
        let l = adversarial_pair_with_grad(&real, &fake)?;
        let args = vec![real.data().to_vec(), fake.data().to_vec()];
        let analytic = vec![l.d_loss_wrt_real.into_vec(), l.d_loss_wrt_fake.into_vec()];
        return grad_check("adversarial_pair_loss", &args, &analytic, step, &Probes::All, |a| {
            let r = Tensor4::from_vec(map_shape, a[0].clone())?;
            let f = Tensor4::from_vec(map_shape, a[1].clone())?;
            Ok(adversarial_pair_with_grad(&r, &f)?.d_loss)
        });
    }
    let generated = image(shape, &mut rng);
    let target = image(shape, &mut rng);
    let extractor = seeded_extractor(seed);
    let eval = |g: &Tensor4<f64>| -> Result<(f64, Tensor4<f64>), TensorError> {
        match term {
            LossTerm::Global => global_similarity_with_grad(g, &target),
            LossTerm::Redmean => perceptual_redmean_with_grad(g, &target),
            LossTerm::Content => content_with_grad(&extractor, g, &target),
            LossTerm::Adversarial => unreachable!(),
        }
    };
    let (_, grad) = eval(&generated)?;
    let args = [generated.data().to_vec()];
    let analytic = [grad.into_vec()];
    if term == LossTerm::Content {
        // The extractor's ReLUs make the content term piecewise smooth; the
        // numeric side holds them at the unperturbed sign pattern.
        let pattern = extractor.kink_pattern(&generated)?;
        let target_features = extractor.features(&target)?;
        let probes = Probes::Sample {
            count: CONTENT_PROBES,
            seed,
        };
        return grad_check("content_loss", &args, &analytic, step, &probes, |a| {
            let g = Tensor4::from_vec(shape, a[0].clone())?;
            let features = extractor.features_with_pattern(&g, &pattern)?;
            Ok(mean_norm_with_grad(&features, &target_features).0)
        });
    }
    grad_check("loss_term", &args, &analytic, step, &Probes::All, |a| {
        Ok(eval(&Tensor4::from_vec(shape, a[0].clone())?)?.0)
    })
}

/// Checks the gradient of the full generator objective with respect to every
/// trainable generator parameter, end to end through a tiny `2x` generator.
///
/// When `weights.lambda_adv > 0` the objective includes
/// `lambda_adv * -mean(log D)` from a tiny discriminator in infer mode, as in
/// the training step. `probes` selects which coordinates of each parameter
/// tensor are perturbed.
///
/// With thousands of ReLUs between the parameters and the loss, almost every
/// perturbation flips one of them, so the numeric side evaluates the
/// objective with each (leaky) ReLU in the generator, extractor and
/// discriminator held at its unperturbed sign. That function is smooth and
/// shares value and gradient with the objective at the base point; the
/// activation masks themselves are covered by the per-op checks.
pub fn check_generator_objective(
    seed: u64,
    step: f64,
    probes: &Probes,
    weights: &LossWeights,
) -> Result<GradCheckReport, TensorError> {
    weights.validate()?;
    let adversarial = weights.lambda_adv > 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lr = image(Shape4::new(1, 3, 8, 8), &mut rng);
    let hr = image(Shape4::new(1, 3, 16, 16), &mut rng);
    let generator = build_generator(&GeneratorConfig::tiny(1), seed)
        .map_err(|e| TensorError::config("check_generator_objective", e.to_string()))?
        .to_f64();
    let discriminator = build_discriminator(&DiscriminatorConfig::tiny(), seed ^ 0xD15C)
        .map_err(|e| TensorError::config("check_generator_objective", e.to_string()))?
        .cast::<f64>();
    let extractor = seeded_extractor(seed);
    let condition = condition_from_lr(&lr, 16, 16)?;

    let (out, tape, _) = generator.forward_train(&lr)?;
    let (validity, d_tape) = if adversarial {
        let (v, t, _) = discriminator.forward_recorded(&out, &condition, BnMode::Infer)?;
        (Some(v), Some(t))
    } else {
        (None, None)
    };
    let loss = generator_total_loss(weights, &extractor, &out, &hr, validity.as_ref())?;
    let mut upstream = loss.d_generated;
    if let (Some(t), Some(dv)) = (&d_tape, &loss.d_validity) {
        let (d_candidate, _) = discriminator.backward(t, dv, false)?;
        upstream.add_scaled(&d_candidate, 1.0)?;
    }
    let analytic = generator.backward(&tape, &upstream)?;
    let args: Vec<Vec<f64>> = generator
        .net()
        .state()
        .into_iter()
        .filter(|e| e.trainable)
        .map(|e| e.values.to_vec())
        .collect();

    let g_pattern = generator.net().kink_pattern(&tape);
    let c_pattern = extractor.kink_pattern(&out)?;
    let d_pattern = d_tape.as_ref().map(|t| discriminator.net().kink_pattern(t));
    let target_features = extractor.features(&hr)?;

    grad_check_report("generator_total_loss", &args, &analytic, step, probes, |a| {
        let mut g = generator.clone();
        for (dst, src) in g.net_mut().params_mut().into_iter().zip(a) {
            dst.copy_from_slice(src);
        }
        let out = g.net().forward_with_pattern(&lr, BnMode::Train, &g_pattern)?;
        let features = extractor.features_with_pattern(&out, &c_pattern)?;
        let mut total = weights.lambda_c * mean_norm_with_grad(&features, &target_features).0
            + weights.lambda_p * perceptual_redmean_with_grad(&out, &hr)?.0
            + weights.lambda_2 * global_similarity_with_grad(&out, &hr)?.0;
        if let Some(pattern) = &d_pattern {
            let v = discriminator.forward_with_pattern(&out, &condition, BnMode::Infer, pattern)?;
            total += weights.lambda_adv * generator_adversarial_with_grad(&v)?.0;
        }
        Ok(total)
    })
}
