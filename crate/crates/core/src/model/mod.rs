//! Generator and discriminator networks, and their checkpoint format.

pub mod checkpoint;
mod discriminator;
mod generator;
pub mod graph;

use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointEntry};
pub use discriminator::{build_discriminator, condition_from_lr, Discriminator, DiscriminatorConfig};
pub use generator::{build_generator, Generator, GeneratorConfig};
pub use graph::{BnUpdates, Layer, LayerKind, Recorded, Sequential, StateEntry, Tape};

use crate::tensor::{Scalar, Shape4, Tensor4, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint entry {entry} is corrupt: {reason}")]
    Corrupt { entry: String, reason: String },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl ModelError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        ModelError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Uniform weights in `[-bound, bound]` with `bound = scale * sqrt(6 / fan_in)`.
pub(crate) fn he_uniform<R: Rng>(rng: &mut R, shape: Shape4, fan_in: usize, scale: f64) -> Tensor4<f32> {
    let bound = scale * (6.0 / fan_in as f64).sqrt();
    Tensor4::from_fn(shape, |_| rng.random_range(-bound..=bound) as f32)
}

/// Copies every state tensor of `net` into a checkpoint, names as in
/// [`Sequential::state`].
pub fn state_to_checkpoint(net: &Sequential<f32>) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    for e in net.state() {
        ckpt.push(e.name, e.dims, e.values.to_vec())
            .expect("layer names are unique and dims match values");
    }
    ckpt
}

/// Loads `ckpt` into `net`. Names, order and dims must match exactly; on any
/// mismatch `net` is left untouched.
pub fn load_state(net: &mut Sequential<f32>, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let expected: Vec<(String, Vec<usize>)> = net.state().into_iter().map(|e| (e.name, e.dims)).collect();
    if expected.len() != ckpt.len() {
        return Err(ModelError::Mismatch(format!(
            "model has {} state tensors, checkpoint has {}",
            expected.len(),
            ckpt.len()
        )));
    }
    for ((name, dims), entry) in expected.iter().zip(ckpt.entries()) {
        if *name != entry.name || *dims != entry.dims {
            return Err(ModelError::Mismatch(format!(
                "expected {name} {dims:?}, found {} {:?}",
                entry.name, entry.dims
            )));
        }
    }
    for (dst, entry) in net.state_mut().into_iter().zip(ckpt.entries()) {
        dst.copy_from_slice(&entry.data);
    }
    Ok(())
}

pub(crate) fn cast_net<T: Scalar>(net: &Sequential<f32>) -> Sequential<T> {
    net.cast()
}
