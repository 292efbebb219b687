//! Conditional PatchGAN discriminator.
//!
//! Input is the channel concatenation `(condition, candidate)` where the
//! condition is the low-resolution image bicubically resized to the candidate
//! extent. Every layer is a 3x3 convolution; all but the last are followed by
//! Leaky-ReLU and batch norm, the last emits one channel through a sigmoid.
//! The stride layout must halve the extent exactly four times.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    he_uniform, load_state, state_to_checkpoint, Checkpoint, Layer, LayerKind, ModelError, Recorded, Sequential, Tape,
};
use crate::tensor::{upsample_bicubic, Activation, BnMode, BnParams, ConvParams, Scalar, Shape4, Tensor4, TensorError};

/// Product of all strides; the validity map is this much smaller than the input.
pub const PATCH_REDUCTION: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub layers: usize,
    pub stride_layout: Vec<usize>,
    /// Filters of the first layer, doubled at each later stride-2 layer.
    pub base_filters: usize,
    pub max_filters: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            layers: 9,
            stride_layout: vec![2, 2, 2, 2, 1, 1, 1, 1, 1],
            base_filters: 32,
            max_filters: 256,
            leaky_slope: Activation::DEFAULT_LEAKY_SLOPE,
        }
    }
}

impl DiscriminatorConfig {
    /// Desk-scale profile used together with the tiny generator.
    pub fn tiny() -> Self {
        DiscriminatorConfig {
            base_filters: 8,
            max_filters: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.stride_layout.len() != self.layers {
            return Err(ModelError::Config(format!(
                "stride layout has {} entries for {} layers",
                self.stride_layout.len(),
                self.layers
            )));
        }
        if self.stride_layout.iter().any(|&s| s != 1 && s != 2) {
            return Err(ModelError::Config("strides must be 1 or 2".into()));
        }
        let product: usize = self.stride_layout.iter().product();
        if product != PATCH_REDUCTION {
            return Err(ModelError::Config(format!(
                "stride layout product must be {PATCH_REDUCTION}, got {product}"
            )));
        }
        if self.base_filters == 0 || self.max_filters < self.base_filters {
            return Err(ModelError::Config("need 1 <= base_filters <= max_filters".into()));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(ModelError::Config("leaky slope must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Output channels of every layer.
    pub fn widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.layers);
        let mut f = self.base_filters;
        for (i, &s) in self.stride_layout.iter().enumerate() {
            if i > 0 && s == 2 {
                f = (f * 2).min(self.max_filters);
            }
            widths.push(if i + 1 == self.layers { 1 } else { f });
        }
        widths
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T = f32> {
    config: DiscriminatorConfig,
    net: Sequential<T>,
}

pub fn build_discriminator(config: &DiscriminatorConfig, seed: u64) -> Result<Discriminator<f32>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut in_c = 6;
    for (i, (&stride, out_c)) in config.stride_layout.iter().zip(config.widths()).enumerate() {
        let weight = he_uniform(&mut rng, Shape4::new(out_c, in_c, 3, 3), in_c * 9, 1.0);
        let params = ConvParams::new(weight, vec![0.0; out_c], stride, 1).expect("valid conv shape");
        layers.push(Layer::new(format!("d{i}.conv"), LayerKind::Conv(params)));
        if i + 1 == config.layers {
            layers.push(Layer::new(format!("d{i}.sigmoid"), LayerKind::Act(Activation::Sigmoid)));
        } else {
            layers.push(Layer::new(
                format!("d{i}.lrelu"),
                LayerKind::Act(Activation::LeakyRelu(config.leaky_slope)),
            ));
            layers.push(Layer::new(
                format!("d{i}.bn"),
                LayerKind::BatchNorm(BnParams::new(out_c)),
            ));
        }
        in_c = out_c;
    }
    Ok(Discriminator {
        config: config.clone(),
        net: Sequential::new(layers),
    })
}

/// Bicubically resizes a low-resolution batch to `height x width`, clamped to `[-1, 1]`.
pub fn condition_from_lr<T: Scalar>(lr: &Tensor4<T>, height: usize, width: usize) -> Result<Tensor4<T>, TensorError> {
    let up = upsample_bicubic(lr, height, width)?;
    Ok(up.map(|v| v.max(-T::one()).min(T::one())))
}

impl<T: Scalar> Discriminator<T> {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn net(&self) -> &Sequential<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential<T> {
        &mut self.net
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    fn pair(candidate: &Tensor4<T>, condition: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
        let (a, b) = (candidate.shape(), condition.shape());
        if a != b || a.channels != 3 {
            return Err(TensorError::shape(
                "forward_discriminator",
                format!("3-channel condition of candidate shape {a}"),
                b,
            ));
        }
        Tensor4::concat_channels(condition, candidate)
    }

    /// Validity map `(b, 1, h/16, w/16)` with batch norm in infer mode.
    pub fn forward(&self, candidate: &Tensor4<T>, condition: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
        self.net.infer(&Self::pair(candidate, condition)?)
    }

    /// Recorded forward pass with batch norm in train mode.
    pub fn forward_train(&self, candidate: &Tensor4<T>, condition: &Tensor4<T>) -> Result<Recorded<T>, TensorError> {
        self.forward_recorded(candidate, condition, BnMode::Train)
    }

    /// Recorded forward pass with an explicit batch-norm mode; the generator
    /// step backpropagates through the discriminator in infer mode.
    pub fn forward_recorded(
        &self,
        candidate: &Tensor4<T>,
        condition: &Tensor4<T>,
        mode: BnMode,
    ) -> Result<Recorded<T>, TensorError> {
        self.net.forward_recorded(&Self::pair(candidate, condition)?, mode)
    }

    /// See [`Sequential::forward_with_pattern`].
    pub fn forward_with_pattern(
        &self,
        candidate: &Tensor4<T>,
        condition: &Tensor4<T>,
        mode: BnMode,
        pattern: &[bool],
    ) -> Result<Tensor4<T>, TensorError> {
        self.net
            .forward_with_pattern(&Self::pair(candidate, condition)?, mode, pattern)
    }

    /// Gradient with respect to the candidate image and, when `want_params`,
    /// the parameter gradients.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        upstream: &Tensor4<T>,
        want_params: bool,
    ) -> Result<(Tensor4<T>, Vec<Vec<T>>), TensorError> {
        let (d_pair, grads) = self.net.backward(tape, upstream, want_params)?;
        let (_, d_candidate) = d_pair.split_channels(3)?;
        Ok((d_candidate, grads))
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            net: self.net.cast(),
        }
    }
}

impl Discriminator<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        state_to_checkpoint(&self.net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        self.to_checkpoint().save(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, config: &DiscriminatorConfig) -> Result<Self, ModelError> {
        let mut d = build_discriminator(config, 0)?;
        load_state(&mut d.net, ckpt)?;
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_scale_map_extent() {
        let d = build_discriminator(&DiscriminatorConfig::tiny(), 1).unwrap();
        let x = Tensor4::<f32>::from_fn(Shape4::new(2, 3, 48, 64), |i| ((i % 13) as f32 / 6.5) - 1.0);
        let y = d.forward(&x, &x.map(|v| -v)).unwrap();
        assert_eq!(y.shape(), Shape4::new(2, 1, 3, 4));
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn widths_double_on_stride_two_up_to_cap() {
        assert_eq!(
            DiscriminatorConfig::default().widths(),
            vec![32, 64, 128, 256, 256, 256, 256, 256, 1]
        );
    }

    #[test]
    fn bad_stride_product_is_config_error() {
        let c = DiscriminatorConfig {
            stride_layout: vec![2; 9],
            ..DiscriminatorConfig::default()
        };
        assert!(matches!(build_discriminator(&c, 0), Err(ModelError::Config(_))));
        let c = DiscriminatorConfig {
            layers: 8,
            ..DiscriminatorConfig::default()
        };
        assert!(build_discriminator(&c, 0).is_err());
    }

    #[test]
    fn extent_mismatch_is_rejected() {
        let d = build_discriminator(&DiscriminatorConfig::tiny(), 1).unwrap();
        let a = Tensor4::<f32>::zeros(Shape4::new(1, 3, 32, 32));
        let b = Tensor4::<f32>::zeros(Shape4::new(1, 3, 32, 48));
        assert!(matches!(d.forward(&a, &b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn infer_mode_is_repeatable() {
        let d = build_discriminator(&DiscriminatorConfig::tiny(), 9).unwrap();
        let x = Tensor4::<f32>::from_fn(Shape4::new(1, 3, 32, 48), |i| ((i % 7) as f32 / 3.5) - 1.0);
        assert_eq!(d.forward(&x, &x).unwrap(), d.forward(&x, &x).unwrap());
    }
}
