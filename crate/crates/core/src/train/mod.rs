//! Optimiser, training loops and the inference, evaluation and benchmark
//! entry points built on a trained generator.

mod adam;
mod config;
mod infer;
mod log;
mod trainer;

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use adam::{adam_step, AdamParams, AdamState};
pub use config::{TrainConfig, TrainMode};
pub use infer::{
    bench, bench_checkpoint, eval_checkpoint, eval_report, infer, upscale, BenchReport, Roi, BENCH_WARMUP,
    MIN_BENCH_ITERS, MIN_ROI_SIDE,
};
pub use log::{EpochRecord, StepRecord, TrainLog};
pub use trainer::{
    train, train_adversarial, train_generative, DiscriminatorStats, TrainOutcome, Trainer, COLLAPSE_STEPS,
};

use crate::datakit::DataError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },
    #[error(
        "discriminator outputs saturated at 0/1 for {} consecutive steps (step {step})",
        COLLAPSE_STEPS
    )]
    Collapse { step: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for numeric failures (non-finite values, discriminator collapse).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. }
                | TrainError::Collapse { .. }
                | TrainError::Tensor(TensorError::NonFinite { .. })
        )
    }
}
