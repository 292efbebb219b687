use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{he_uniform, Checkpoint, Layer, LayerKind, ModelError, Sequential};
use crate::tensor::{Activation, BnMode, ConvParams, Scalar, Shape4, Tensor4, TensorError};

pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5EED_F00D;
pub const DEFAULT_EXTRACTOR_WIDTH: usize = 32;

/// Where the feature extractor's weights come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ExtractorSource {
    /// Five 3x3 conv + ReLU stages with seeded weights; stages 2 and 4 use stride 2.
    Seeded(u64),
    /// Weights from a checkpoint, wired up by a plain-text layer manifest.
    External { checkpoint: PathBuf, manifest: PathBuf },
}

impl Default for ExtractorSource {
    fn default() -> Self {
        ExtractorSource::Seeded(DEFAULT_EXTRACTOR_SEED)
    }
}

/// Frozen convolutional feature map used by the content loss. Its weights
/// never receive gradient updates and are not exposed to the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T = f32> {
    net: Sequential<T>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn features(&self, x: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
        self.net.infer(x)
    }

    /// Gradient of `<features(x), upstream>` with respect to `x`.
    pub(crate) fn input_gradient(
        &self,
        x: &Tensor4<T>,
        upstream_fn: impl FnOnce(&Tensor4<T>) -> Result<Tensor4<T>, TensorError>,
    ) -> Result<Tensor4<T>, TensorError> {
        let (features, tape, _) = self.net.forward_recorded(x, BnMode::Infer)?;
        let upstream = upstream_fn(&features)?;
        Ok(self.net.backward(&tape, &upstream, false)?.0)
    }

    pub(crate) fn kink_pattern(&self, x: &Tensor4<T>) -> Result<Vec<bool>, TensorError> {
        let (_, tape, _) = self.net.forward_recorded(x, BnMode::Infer)?;
        Ok(self.net.kink_pattern(&tape))
    }

    pub(crate) fn features_with_pattern(&self, x: &Tensor4<T>, pattern: &[bool]) -> Result<Tensor4<T>, TensorError> {
        self.net.forward_with_pattern(x, BnMode::Infer, pattern)
    }

    pub fn num_weights(&self) -> usize {
        self.net.num_params()
    }

    pub fn cast<U: Scalar>(&self) -> FeatureExtractor<U> {
        FeatureExtractor { net: self.net.cast() }
    }

    /// Identity extractor, `features(x) = x`.
    pub fn identity() -> Self {
        FeatureExtractor {
            net: Sequential::new(Vec::new()),
        }
    }
}

pub fn build_feature_extractor(source: &ExtractorSource) -> Result<FeatureExtractor<f32>, ModelError> {
    match source {
        ExtractorSource::Seeded(seed) => Ok(seeded(*seed)),
        ExtractorSource::External { checkpoint, manifest } => external(checkpoint, manifest),
    }
}

fn seeded(seed: u64) -> FeatureExtractor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = DEFAULT_EXTRACTOR_WIDTH;
    let mut layers = Vec::new();
    let mut in_c = 3;
    for stage in 1..=5 {
        let stride = if stage == 2 || stage == 4 { 2 } else { 1 };
        let weight = he_uniform(&mut rng, Shape4::new(width, in_c, 3, 3), in_c * 9, 1.0);
        let params = ConvParams::new(weight, vec![0.0; width], stride, 1).expect("valid conv shape");
        layers.push(Layer::new(format!("phi{stage}.conv"), LayerKind::Conv(params)));
        layers.push(Layer::new(format!("phi{stage}.relu"), LayerKind::Act(Activation::Relu)));
        in_c = width;
    }
    FeatureExtractor {
        net: Sequential::new(layers),
    }
}

/// Parses a layer manifest. One layer per line, `#` starts a comment:
///
/// ```text
/// conv <entry-prefix> stride=<s> padding=<p>
/// relu | leaky_relu <slope> | tanh | sigmoid
/// ```
///
/// `conv` reads `<entry-prefix>.weight` `(out, in, kh, kw)` and
/// `<entry-prefix>.bias` `(out)` from the checkpoint.
fn external(checkpoint: &Path, manifest: &Path) -> Result<FeatureExtractor<f32>, ModelError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let text = fs::read_to_string(manifest).map_err(|e| ModelError::Io {
        path: manifest.to_path_buf(),
        source: e,
    })?;
    parse_manifest(&text, &ckpt)
}

pub(crate) fn parse_manifest(text: &str, ckpt: &Checkpoint) -> Result<FeatureExtractor<f32>, ModelError> {
    let mut layers = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| ModelError::Format(format!("manifest line {}: {msg}", lineno + 1));
        let mut words = line.split_whitespace();
        let op = words.next().unwrap_or_default();
        let name = format!("ext{}", layers.len());
        let kind = match op {
            "conv" => {
                let prefix = words.next().ok_or_else(|| bad("conv needs an entry prefix".into()))?;
                let (mut stride, mut padding) = (1usize, 0usize);
                for kv in words.by_ref() {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| bad(format!("expected key=value, found {kv}")))?;
                    let v: usize = v.parse().map_err(|_| bad(format!("bad number in {kv}")))?;
                    match k {
                        "stride" => stride = v,
                        "padding" => padding = v,
                        _ => return Err(bad(format!("unknown conv option {k}"))),
                    }
                }
                let entry = |suffix: &str| {
                    ckpt.get(&format!("{prefix}.{suffix}"))
                        .ok_or_else(|| bad(format!("checkpoint has no {prefix}.{suffix}")))
                };
                let w = entry("weight")?;
                let b = entry("bias")?;
                if w.dims.len() != 4 || b.dims != [w.dims[0]] {
                    return Err(bad(format!(
                        "{prefix}: weight {:?} / bias {:?} are not a conv",
                        w.dims, b.dims
                    )));
                }
                let shape = Shape4::new(w.dims[0], w.dims[1], w.dims[2], w.dims[3]);
                let weight = Tensor4::from_vec(shape, w.data.clone())?;
                LayerKind::Conv(ConvParams::new(weight, b.data.clone(), stride, padding)?)
            }
            "relu" => LayerKind::Act(Activation::Relu),
            "tanh" => LayerKind::Act(Activation::Tanh),
            "sigmoid" => LayerKind::Act(Activation::Sigmoid),
            "leaky_relu" => {
                let slope: f64 = words
                    .next()
                    .ok_or_else(|| bad("leaky_relu needs a slope".into()))?
                    .parse()
                    .map_err(|_| bad("bad leaky_relu slope".into()))?;
                LayerKind::Act(Activation::LeakyRelu(slope))
            }
            other => return Err(bad(format!("unknown layer kind {other}"))),
        };
        if !matches!(kind, LayerKind::Conv(_)) && words.next().is_some() {
            return Err(bad("unexpected trailing tokens".into()));
        }
        layers.push(Layer::new(name, kind));
    }
    if layers.is_empty() {
        return Err(ModelError::Format("manifest defines no layers".into()));
    }
    Ok(FeatureExtractor {
        net: Sequential::new(layers),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_extractor_quarter_resolution() {
        let phi = build_feature_extractor(&ExtractorSource::default()).unwrap();
        let y = phi.features(&Tensor4::zeros(Shape4::new(1, 3, 32, 32))).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 32, 8, 8));
    }

    #[test]
    fn same_seed_same_extractor() {
        let a = build_feature_extractor(&ExtractorSource::Seeded(3)).unwrap();
        let b = build_feature_extractor(&ExtractorSource::Seeded(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_round_trip() {
        let mut ckpt = Checkpoint::new();
        ckpt.push("block1.weight", vec![2, 3, 3, 3], vec![0.5; 54]).unwrap();
        ckpt.push("block1.bias", vec![2], vec![0.0, 1.0]).unwrap();
        let phi = parse_manifest("# features\nconv block1 stride=2 padding=1\nleaky_relu 0.1\n", &ckpt).unwrap();
        let y = phi.features(&Tensor4::filled(Shape4::new(1, 3, 8, 8), 1.0)).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 2, 4, 4));
        assert_eq!(y.at(0, 0, 1, 1), 13.5);
        assert_eq!(y.at(0, 1, 1, 1), 14.5);
    }

    #[test]
    fn malformed_manifests() {
        let mut ckpt = Checkpoint::new();
        ckpt.push("c.weight", vec![1, 3, 1, 1], vec![1.0; 3]).unwrap();
        ckpt.push("c.bias", vec![1], vec![0.0]).unwrap();
        for text in [
            "",
            "pool 2",
            "conv missing",
            "conv c stride=x",
            "conv c dilation=2",
            "relu extra",
        ] {
            assert!(
                matches!(parse_manifest(text, &ckpt), Err(ModelError::Format(_))),
                "{text}"
            );
        }
    }
}
