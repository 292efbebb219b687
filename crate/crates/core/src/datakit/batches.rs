use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::{images_to_tensor, ImageRgb8};
use super::manifest::{DatasetManifest, Split};
use super::DataError;
use crate::tensor::Tensor4;

/// A paired batch in `[-1, 1]`; `hr` is `scale` times larger than `lr`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub lr: Tensor4<f32>,
    pub hr: Tensor4<f32>,
}

/// Seeded, epoch-wise shuffled batches of one split. Each call to
/// [`BatchStream::next_epoch`] draws a fresh permutation from the stream's
/// generator; the last batch of an epoch may be short.
pub struct BatchStream {
    ids: Vec<String>,
    pairs: Vec<(PathBuf, PathBuf)>,
    scale: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    cache: Option<Vec<Option<(ImageRgb8, ImageRgb8)>>>,
}

impl BatchStream {
    pub fn new(
        manifest: &DatasetManifest,
        split: Split,
        scale: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::Contract("batch size must be at least 1".into()));
        }
        let pairs = manifest.pairs(split, scale)?;
        if pairs.is_empty() {
            return Err(DataError::Contract(format!("split {split} is empty")));
        }
        Ok(BatchStream {
            ids: manifest.split(split).iter().map(|p| p.id.clone()).collect(),
            pairs,
            scale,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cache: None,
        })
    }

    /// Keeps decoded images in memory after their first use.
    pub fn cached(mut self) -> Self {
        self.cache = Some(vec![None; self.pairs.len()]);
        self
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pairs.len().div_ceil(self.batch_size)
    }

    /// Batch index lists of the next epoch.
    pub fn next_order(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// All batches of the next epoch, loaded lazily.
    pub fn next_epoch(&mut self) -> impl Iterator<Item = Result<Batch, DataError>> + '_ {
        let order = self.next_order();
        order.into_iter().map(move |idx| self.load(&idx))
    }

    fn load_pair(&mut self, i: usize) -> Result<(ImageRgb8, ImageRgb8), DataError> {
        if let Some(Some(pair)) = self.cache.as_ref().map(|c| &c[i]) {
            return Ok(pair.clone());
        }
        let (lr_path, hr_path) = &self.pairs[i];
        let lr = ImageRgb8::load(lr_path)?;
        let hr = ImageRgb8::load(hr_path)?;
        if (hr.width(), hr.height()) != (lr.width() * self.scale, lr.height() * self.scale) {
            return Err(DataError::Contract(format!(
                "{} is {}x{} but {} is {}x{}; expected a {}x ratio",
                hr_path.display(),
                hr.width(),
                hr.height(),
                lr_path.display(),
                lr.width(),
                lr.height(),
                self.scale
            )));
        }
        if let Some(cache) = self.cache.as_mut() {
            cache[i] = Some((lr.clone(), hr.clone()));
        }
        Ok((lr, hr))
    }

    /// Loads the pairs at `indices` into one batch.
    pub fn load(&mut self, indices: &[usize]) -> Result<Batch, DataError> {
        let mut lrs = Vec::with_capacity(indices.len());
        let mut hrs = Vec::with_capacity(indices.len());
        for &i in indices {
            let (lr, hr) = self.load_pair(i)?;
            lrs.push(lr);
            hrs.push(hr);
        }
        Ok(Batch {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            lr: images_to_tensor(&lrs.iter().collect::<Vec<_>>())?,
            hr: images_to_tensor(&hrs.iter().collect::<Vec<_>>())?,
        })
    }
}
