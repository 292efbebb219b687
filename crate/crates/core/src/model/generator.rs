//! The residual-multiplier super-resolution generator.
//!
//! Each multiplier block doubles the spatial extent:
//!
//! ```text
//! conv 4x4 (pad 1) -> R x [conv 3x3 -> ReLU -> conv 3x3 -> + skip]
//!   -> conv 4x4 (pad 2) -> deconv 4x4 stride 2 -> ReLU
//! ```
//!
//! The two 4x4 convolutions use padding 1 and 2 so the pair shrinks the
//! extent by one pixel and grows it back, keeping the block aligned with its
//! input grid. `n` blocks are followed by a 3x3 convolution to RGB and tanh.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    cast_net, he_uniform, load_state, state_to_checkpoint, Checkpoint, Layer, LayerKind, ModelError, Recorded,
    Sequential, Tape,
};
use crate::tensor::{Activation, BnMode, BnParams, ConvParams, Scalar, Shape4, Tensor4, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Number of multiplier blocks; the output is `2^scale_exp` times larger.
    pub scale_exp: u32,
    pub base_filters: usize,
    pub residual_layers: usize,
    /// Insert batch normalization after each convolution of a residual layer.
    pub use_bn_in_drm: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            scale_exp: 3,
            base_filters: 64,
            residual_layers: 8,
            use_bn_in_drm: false,
        }
    }
}

impl GeneratorConfig {
    pub fn full(scale_exp: u32) -> Self {
        GeneratorConfig {
            scale_exp,
            ..Self::default()
        }
    }

    /// Desk-scale profile: 16 filters, 2 residual layers.
    pub fn tiny(scale_exp: u32) -> Self {
        GeneratorConfig {
            scale_exp,
            base_filters: 16,
            residual_layers: 2,
            use_bn_in_drm: false,
        }
    }

    pub fn scale(&self) -> usize {
        1 << self.scale_exp
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(1..=3).contains(&self.scale_exp) {
            return Err(ModelError::Config(format!(
                "scale exponent must be 1, 2 or 3, got {}",
                self.scale_exp
            )));
        }
        if self.base_filters == 0 || self.residual_layers == 0 {
            return Err(ModelError::Config(
                "base_filters and residual_layers must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Trainable parameter count:
    ///
    /// ```text
    /// sum over blocks b of
    ///     (16 c_b f + f)                 head, c_0 = 3 and c_b = f after
    ///   + R (2 (9 f^2 + f) [+ 4 f])      residual layers [with BN]
    ///   + 2 (16 f^2 + f)                 tail conv and deconv
    /// + (27 f + 3)                       output conv
    /// ```
    pub fn param_count(&self) -> usize {
        let f = self.base_filters;
        let r = self.residual_layers;
        let bn = if self.use_bn_in_drm { 4 * f } else { 0 };
        let residual = r * (2 * (9 * f * f + f) + bn);
        let tail = 2 * (16 * f * f + f);
        (0..self.scale_exp as usize)
            .map(|b| {
                let c = if b == 0 { 3 } else { f };
                16 * c * f + f + residual + tail
            })
            .sum::<usize>()
            + 27 * f
            + 3
    }

    /// Recovers the configuration from checkpoint entry names and shapes.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let head = ckpt
            .get("drm0.head.weight")
            .ok_or_else(|| ModelError::Mismatch("no drm0.head.weight entry".into()))?;
        let base_filters = *head
            .dims
            .first()
            .ok_or_else(|| ModelError::Mismatch("drm0.head.weight has rank 0".into()))?;
        let scale_exp = (0..)
            .take_while(|b| ckpt.get(&format!("drm{b}.head.weight")).is_some())
            .count() as u32;
        let residual_layers = (0..)
            .take_while(|r| ckpt.get(&format!("drm0.res{r}.conv1.weight")).is_some())
            .count();
        let use_bn_in_drm = ckpt.get("drm0.res0.bn1.gamma").is_some();
        let config = GeneratorConfig {
            scale_exp,
            base_filters,
            residual_layers,
            use_bn_in_drm,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Super-resolution generator: `(b, 3, h, w)` in `[-1, 1]` to
/// `(b, 3, 2^n h, 2^n w)` in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T = f32> {
    config: GeneratorConfig,
    net: Sequential<T>,
}

fn conv(
    rng: &mut ChaCha8Rng,
    out_c: usize,
    in_c: usize,
    k: usize,
    stride: usize,
    padding: usize,
    scale: f64,
) -> ConvParams<f32> {
    let weight = he_uniform(rng, Shape4::new(out_c, in_c, k, k), in_c * k * k, scale);
    ConvParams::new(weight, vec![0.0; out_c], stride, padding).expect("valid conv shape")
}

/// Builds a generator with seeded fan-in-scaled uniform weights and zero biases.
pub fn build_generator(config: &GeneratorConfig, seed: u64) -> Result<Generator<f32>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = config.base_filters;
    // Shrinks the last conv of every residual branch so the skip sum does not
    // grow with depth at initialization.
    let branch_scale = 1.0 / (config.residual_layers as f64).sqrt();
    let mut layers = Vec::new();
    for b in 0..config.scale_exp {
        let in_c = if b == 0 { 3 } else { f };
        let p = format!("drm{b}");
        layers.push(Layer::new(
            format!("{p}.head"),
            LayerKind::Conv(conv(&mut rng, f, in_c, 4, 1, 1, 1.0)),
        ));
        for r in 0..config.residual_layers {
            let q = format!("{p}.res{r}");
            let mut body = vec![Layer::new(
                format!("{q}.conv1"),
                LayerKind::Conv(conv(&mut rng, f, f, 3, 1, 1, 1.0)),
            )];
            if config.use_bn_in_drm {
                body.push(Layer::new(format!("{q}.bn1"), LayerKind::BatchNorm(BnParams::new(f))));
            }
            body.push(Layer::new(format!("{q}.relu"), LayerKind::Act(Activation::Relu)));
            body.push(Layer::new(
                format!("{q}.conv2"),
                LayerKind::Conv(conv(&mut rng, f, f, 3, 1, 1, branch_scale)),
            ));
            if config.use_bn_in_drm {
                body.push(Layer::new(format!("{q}.bn2"), LayerKind::BatchNorm(BnParams::new(f))));
            }
            layers.push(Layer::new(q, LayerKind::Residual(body)));
        }
        layers.push(Layer::new(
            format!("{p}.tail"),
            LayerKind::Conv(conv(&mut rng, f, f, 4, 1, 2, 1.0)),
        ));
        // A stride-2 4x4 transposed conv sees 4 input taps per output pixel.
        let up_weight = he_uniform(&mut rng, Shape4::new(f, f, 4, 4), f * 4, 1.0);
        layers.push(Layer::new(
            format!("{p}.up"),
            LayerKind::Deconv(ConvParams::new_transposed(up_weight, vec![0.0; f], 2, 1).expect("valid deconv shape")),
        ));
        layers.push(Layer::new(format!("{p}.relu"), LayerKind::Act(Activation::Relu)));
    }
    layers.push(Layer::new(
        "out.conv",
        LayerKind::Conv(conv(&mut rng, 3, f, 3, 1, 1, 1.0)),
    ));
    layers.push(Layer::new("out.tanh", LayerKind::Act(Activation::Tanh)));
    Ok(Generator {
        config: config.clone(),
        net: Sequential::new(layers),
    })
}

impl<T: Scalar> Generator<T> {
    pub fn config(&self) -> &GeneratorConfig {
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

    fn check_input(&self, x: &Tensor4<T>) -> Result<(), TensorError> {
        let s = x.shape();
        if s.channels != 3 {
            return Err(TensorError::shape("forward_generator", "(batch, 3, h, w)", s));
        }
        Ok(())
    }

    /// Inference forward pass.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
        self.check_input(x)?;
        self.net.infer(x)
    }

    /// Training forward pass; batch norm (when present) uses batch statistics.
    pub fn forward_train(&self, x: &Tensor4<T>) -> Result<Recorded<T>, TensorError> {
        self.check_input(x)?;
        self.net.forward_recorded(x, BnMode::Train)
    }

    /// Parameter gradients, in `net().state()` trainable order.
    pub fn backward(&self, tape: &Tape<T>, upstream: &Tensor4<T>) -> Result<Vec<Vec<T>>, TensorError> {
        Ok(self.net.backward(tape, upstream, true)?.1)
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            net: self.net.cast(),
        }
    }
}

impl Generator<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        state_to_checkpoint(&self.net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        self.to_checkpoint().save(path)
    }

    /// Loads a checkpoint saved from a generator with exactly `config`.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: &GeneratorConfig) -> Result<Self, ModelError> {
        let mut g = build_generator(config, 0)?;
        load_state(&mut g.net, ckpt)?;
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>, config: &GeneratorConfig) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?, config)
    }

    /// Loads a checkpoint, recovering the configuration from its entries.
    pub fn load_inferred(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let ckpt = Checkpoint::load(path)?;
        let config = GeneratorConfig::from_checkpoint(&ckpt)?;
        Self::from_checkpoint(&ckpt, &config)
    }

    pub fn to_f64(&self) -> Generator<f64> {
        Generator {
            config: self.config.clone(),
            net: cast_net(&self.net),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_law_per_block_count() {
        for n in 1..=3 {
            let g = build_generator(
                &GeneratorConfig {
                    base_filters: 4,
                    residual_layers: 1,
                    ..GeneratorConfig::full(n)
                },
                1,
            )
            .unwrap();
            let y = g.forward(&Tensor4::zeros(Shape4::new(2, 3, 12, 10))).unwrap();
            assert_eq!(y.shape(), Shape4::new(2, 3, 12 << n, 10 << n));
        }
    }

    #[test]
    fn equal_seeds_equal_parameters() {
        let c = GeneratorConfig::tiny(2);
        assert_eq!(build_generator(&c, 42).unwrap(), build_generator(&c, 42).unwrap());
        assert_ne!(build_generator(&c, 42).unwrap(), build_generator(&c, 43).unwrap());
    }

    #[test]
    fn closed_form_count_matches_layers() {
        for config in [
            GeneratorConfig::tiny(1),
            GeneratorConfig::tiny(3),
            GeneratorConfig {
                use_bn_in_drm: true,
                ..GeneratorConfig::tiny(2)
            },
            GeneratorConfig::full(1),
            GeneratorConfig::full(3),
        ] {
            let g = build_generator(&config, 0).unwrap();
            assert_eq!(g.num_params(), config.param_count(), "{config:?}");
        }
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut g = build_generator(&GeneratorConfig::tiny(1), 3).unwrap();
        for p in g.net_mut().params_mut() {
            p.fill(0.0);
        }
        let x = Tensor4::from_fn(Shape4::new(1, 3, 8, 8), |i| ((i % 5) as f32 - 2.0) / 2.0);
        assert!(g.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let g = build_generator(&GeneratorConfig::tiny(1), 0).unwrap();
        assert!(matches!(
            g.forward(&Tensor4::zeros(Shape4::new(1, 4, 8, 8))),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn invalid_configs() {
        assert!(build_generator(&GeneratorConfig::full(0), 0).is_err());
        assert!(build_generator(&GeneratorConfig::full(4), 0).is_err());
        assert!(build_generator(
            &GeneratorConfig {
                residual_layers: 0,
                ..GeneratorConfig::tiny(1)
            },
            0
        )
        .is_err());
    }

    #[test]
    fn config_recovered_from_checkpoint() {
        for config in [
            GeneratorConfig::tiny(2),
            GeneratorConfig {
                use_bn_in_drm: true,
                ..GeneratorConfig::tiny(1)
            },
        ] {
            let g = build_generator(&config, 5).unwrap();
            assert_eq!(GeneratorConfig::from_checkpoint(&g.to_checkpoint()).unwrap(), config);
        }
    }

    #[test]
    fn loading_into_a_different_config_fails() {
        let g = build_generator(&GeneratorConfig::tiny(1), 5).unwrap();
        let err = Generator::from_checkpoint(&g.to_checkpoint(), &GeneratorConfig::tiny(2)).unwrap_err();
        assert!(matches!(err, ModelError::Mismatch(_)));
    }
}
