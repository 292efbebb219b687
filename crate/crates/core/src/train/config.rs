use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::adam::AdamParams;
use super::TrainError;
use crate::datakit::SUPPORTED_SCALES;
use crate::losses::{ExtractorSource, LossWeights, DEFAULT_EXTRACTOR_SEED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Generator only, without the adversarial term.
    Gen,
    /// Alternating discriminator and generator updates.
    Gan,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Gen => "gen",
            TrainMode::Gan => "gan",
        })
    }
}

impl FromStr for TrainMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gen" => Ok(TrainMode::Gen),
            "gan" => Ok(TrainMode::Gan),
            other => Err(TrainError::Config(format!("unknown mode {other}; expected gen or gan"))),
        }
    }
}

/// Training run settings, read from TOML. Every key is optional and unknown
/// keys are rejected:
///
/// ```toml
/// mode = "gen"              # gen | gan
/// scale = 4                 # 2 | 4 | 8
/// epochs = 20
/// batch_size = 4
/// learning_rate = 1e-4
/// adam_betas = [0.9, 0.999]
/// adam_epsilon = 1e-8
/// seed = 0
/// checkpoint_every = 5      # epochs between checkpoints
/// tiny = false              # 16 filters, 2 residual layers
/// freeze_discriminator = false
/// extractor_seed = 1592651789
/// # extractor_checkpoint = "vgg.ckpt"   # both or neither
/// # extractor_manifest = "vgg.txt"
///
/// [weights]
/// lambda_c = 1e-2
/// lambda_p = 1e-3
/// lambda_2 = 1.0
/// lambda_adv = 1e-3
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub scale: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: [f64; 2],
    pub adam_epsilon: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub tiny: bool,
    /// Skips discriminator updates in `gan` mode.
    pub freeze_discriminator: bool,
    pub extractor_seed: u64,
    pub extractor_checkpoint: Option<PathBuf>,
    pub extractor_manifest: Option<PathBuf>,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Gen,
            scale: 4,
            epochs: 20,
            batch_size: 4,
            learning_rate: 1e-4,
            adam_betas: [0.9, 0.999],
            adam_epsilon: 1e-8,
            seed: 0,
            checkpoint_every: 5,
            tiny: false,
            freeze_discriminator: false,
            extractor_seed: DEFAULT_EXTRACTOR_SEED,
            extractor_checkpoint: None,
            extractor_manifest: None,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative extractor paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.extractor_checkpoint, &mut cfg.extractor_manifest]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are always serializable")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if !SUPPORTED_SCALES.contains(&self.scale) {
            return bad(format!("scale must be one of 2, 4, 8, got {}", self.scale));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if self.extractor_checkpoint.is_some() != self.extractor_manifest.is_some() {
            return bad("extractor_checkpoint and extractor_manifest must be given together".into());
        }
        self.adam().validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.weights.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.learning_rate,
            beta1: self.adam_betas[0],
            beta2: self.adam_betas[1],
            eps: self.adam_epsilon,
        }
    }

    pub fn scale_exp(&self) -> u32 {
        self.scale.trailing_zeros()
    }

    pub fn extractor_source(&self) -> ExtractorSource {
        match (&self.extractor_checkpoint, &self.extractor_manifest) {
            (Some(checkpoint), Some(manifest)) => ExtractorSource::External {
                checkpoint: checkpoint.clone(),
                manifest: manifest.clone(),
            },
            _ => ExtractorSource::Seeded(self.extractor_seed),
        }
    }

    /// Generator checkpoints a complete run writes: one per interval plus the final one.
    pub fn expected_checkpoints(&self) -> usize {
        self.epochs / self.checkpoint_every + 1
    }
}
