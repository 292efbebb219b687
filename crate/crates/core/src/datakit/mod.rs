//! Paired LR/HR dataset construction and batching.
//!
//! High-resolution images are brought to a fixed extent, JPEG-compressed and
//! then halved repeatedly; every halving that matches a requested scale is
//! written out as a low-resolution set. A TOML manifest records the pairs.

mod batches;
mod image;
mod manifest;
mod prepare;

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use batches::{Batch, BatchStream};
pub use image::{images_to_tensor, ImageRgb8};
pub use manifest::{DatasetManifest, PairEntry, Rejected, Split, MANIFEST_FILE, MANIFEST_VERSION};
pub use prepare::{prepare_lr_sets, PrepareOptions};

use crate::tensor::TensorError;

/// Scales a dataset can provide.
pub const SUPPORTED_SCALES: [usize; 3] = [2, 4, 8];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Contract(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: ::image::ImageError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn image(path: &Path, source: ::image::ImageError) -> Self {
        DataError::Image {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub(crate) fn check_scale(scale: usize) -> Result<(), DataError> {
    if SUPPORTED_SCALES.contains(&scale) {
        Ok(())
    } else {
        Err(DataError::Contract(format!(
            "scale must be one of 2, 4, 8, got {scale}"
        )))
    }
}

/// Seeded batch stream over one split; see [`BatchStream`].
pub fn batch_iter(
    manifest: &DatasetManifest,
    split: Split,
    scale: usize,
    batch_size: usize,
    seed: u64,
) -> Result<BatchStream, DataError> {
    BatchStream::new(manifest, split, scale, batch_size, seed)
}

/// Image files (`png`, `jpg`, `jpeg`) directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| DataError::io(dir, e))? {
        let path = entry.map_err(|e| DataError::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"));
        if is_image && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
