use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::image::ImageRgb8;
use super::manifest::{DatasetManifest, PairEntry, Rejected, MANIFEST_VERSION};
use super::{check_scale, list_images, DataError};

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareOptions {
    pub scales: Vec<usize>,
    pub jpeg_quality: u8,
    pub seed: u64,
    pub hr_width: usize,
    pub hr_height: usize,
    /// Fraction of the training pool held out for validation.
    pub val_fraction: f64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            scales: vec![2, 4, 8],
            jpeg_quality: 85,
            seed: 0,
            hr_width: 640,
            hr_height: 480,
            val_fraction: 0.1,
        }
    }
}

impl PrepareOptions {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.scales.is_empty() {
            return Err(DataError::Contract("at least one scale is required".into()));
        }
        for &s in &self.scales {
            check_scale(s)?;
        }
        if !(1..=100).contains(&self.jpeg_quality) {
            return Err(DataError::Contract(format!(
                "jpeg quality must be in [1, 100], got {}",
                self.jpeg_quality
            )));
        }
        let largest = self.scales.iter().copied().max().unwrap_or(1);
        if self.hr_width == 0
            || self.hr_height == 0
            || !self.hr_width.is_multiple_of(largest)
            || !self.hr_height.is_multiple_of(largest)
        {
            return Err(DataError::Contract(format!(
                "HR extent {}x{} must be a positive multiple of {largest}",
                self.hr_width, self.hr_height
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(DataError::Contract(format!(
                "validation fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    fn sorted_scales(&self) -> Vec<usize> {
        let mut s = self.scales.clone();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Builds HR and LR sets from the images in `hr_dir` and writes
/// `manifest.toml` into `out_dir`.
///
/// Images directly in `hr_dir` form the train/val pool; images in
/// `hr_dir/test` form the test split. Each image is resized (bicubic) to the
/// HR extent, saved as PNG, JPEG-compressed once and then halved repeatedly
/// with bicubic resampling; the halvings at the requested scales are saved as
/// PNG. Unreadable images are skipped and listed under `rejected`.
pub fn prepare_lr_sets(
    hr_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    options: &PrepareOptions,
) -> Result<DatasetManifest, DataError> {
    let (hr_dir, out_dir) = (hr_dir.as_ref(), out_dir.as_ref());
    options.validate()?;
    let pool = list_images(hr_dir)?;
    let test_dir = hr_dir.join("test");
    let test = if test_dir.is_dir() {
        list_images(&test_dir)?
    } else {
        Vec::new()
    };
    if pool.is_empty() && test.is_empty() {
        return Err(DataError::Contract(format!(
            "{} contains no PNG or JPEG images",
            hr_dir.display()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;

    let mut rejected = Vec::new();
    let pool = process_all(&pool, out_dir, "", options, &mut rejected)?;
    let mut test = process_all(&test, out_dir, "test/", options, &mut rejected)?;

    // Seeded train/val split; at least one training pair is kept.
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(options.seed));
    let n_val = ((pool.len() as f64 * options.val_fraction).round() as usize).min(pool.len().saturating_sub(1));
    let mut val: Vec<PairEntry> = order[..n_val].iter().map(|&i| pool[i].clone()).collect();
    let mut train: Vec<PairEntry> = order[n_val..].iter().map(|&i| pool[i].clone()).collect();
    for split in [&mut train, &mut val, &mut test] {
        split.sort_by(|a, b| a.id.cmp(&b.id));
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        jpeg_quality: options.jpeg_quality,
        seed: options.seed,
        scales: options.sorted_scales(),
        hr_width: options.hr_width,
        hr_height: options.hr_height,
        train,
        val,
        test,
        rejected,
        root: out_dir.to_path_buf(),
    };
    manifest.save()?;
    Ok(manifest)
}

fn process_all(
    files: &[PathBuf],
    out_dir: &Path,
    prefix: &str,
    options: &PrepareOptions,
    rejected: &mut Vec<Rejected>,
) -> Result<Vec<PairEntry>, DataError> {
    let scales = options.sorted_scales();
    let mut dirs = vec![format!("{prefix}hr")];
    dirs.extend(scales.iter().map(|s| format!("{prefix}lr_{s}x")));
    for d in &dirs {
        let path = out_dir.join(d);
        fs::create_dir_all(&path).map_err(|e| DataError::io(&path, e))?;
    }
    let results: Vec<_> = files
        .par_iter()
        .map(|path| process_one(path, out_dir, prefix, &scales, options))
        .collect();
    let mut pairs = Vec::new();
    for (path, result) in files.iter().zip(results) {
        match result {
            Ok(entry) => pairs.push(entry),
            // Write failures abort; decoding failures only skip the image.
            Err(e @ DataError::Io { .. }) => return Err(e),
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                rejected.push(Rejected {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                });
            }
        }
    }
    let mut ids = std::collections::HashSet::new();
    if let Some(dup) = pairs.iter().find(|p| !ids.insert(p.id.clone())) {
        return Err(DataError::Contract(format!("two inputs share the name {}", dup.id)));
    }
    Ok(pairs)
}

fn process_one(
    path: &Path,
    out_dir: &Path,
    prefix: &str,
    scales: &[usize],
    options: &PrepareOptions,
) -> Result<PairEntry, DataError> {
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| DataError::Contract(format!("{} has no usable file name", path.display())))?
        .to_string();
    let hr = ImageRgb8::load(path)?.resize_bicubic(options.hr_width, options.hr_height);
    let mut entry = PairEntry {
        id: id.clone(),
        hr: format!("{prefix}hr/{id}.png"),
        lr_2: None,
        lr_4: None,
        lr_8: None,
    };
    save(&hr, out_dir, &entry.hr)?;

    let mut current = hr.jpeg_round_trip(options.jpeg_quality)?;
    let largest = scales.iter().copied().max().unwrap_or(1);
    let mut scale = 1;
    while scale < largest {
        scale *= 2;
        current = current.resize_bicubic(current.width() / 2, current.height() / 2);
        if scales.contains(&scale) {
            let rel = format!("{prefix}lr_{scale}x/{id}.png");
            save(&current, out_dir, &rel)?;
            entry.set_lr(scale, rel);
        }
    }
    Ok(entry)
}

fn save(img: &ImageRgb8, out_dir: &Path, rel: &str) -> Result<(), DataError> {
    let path = out_dir.join(rel);
    img.save(&path).map_err(|e| match e {
        DataError::Image {
            path,
            source: ::image::ImageError::IoError(io),
        } => DataError::Io { path, source: io },
        other => other,
    })
}
