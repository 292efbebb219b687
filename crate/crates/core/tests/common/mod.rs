//! Shared fixtures: smooth synthetic scenes and small prepared datasets.

#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srdrm::datakit::{prepare_lr_sets, DatasetManifest, ImageRgb8, PrepareOptions};

/// Low-frequency colour pattern: a few seeded sinusoids per channel.
pub fn scene(width: usize, height: usize, seed: u64) -> ImageRgb8 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| {
            [
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..2.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(20.0..45.0),
            ]
        })
        .collect();
    let base: [f64; 3] = [
        rng.random_range(70.0..180.0),
        rng.random_range(70.0..180.0),
        rng.random_range(70.0..180.0),
    ];
    ImageRgb8::from_fn(width, height, |x, y| {
        let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
        let mut px = [0u8; 3];
        for c in 0..3 {
            let mut val = base[c];
            for w in &waves[c * 3..c * 3 + 3] {
                val += w[3] * (std::f64::consts::TAU * (w[0] * u + w[1] * v) + w[2]).sin();
            }
            px[c] = val.round().clamp(0.0, 255.0) as u8;
        }
        px
    })
}

/// `count` scenes of `width x height` prepared as a dataset at `scales`,
/// every pair in the training split.
pub fn synthetic_dataset(
    root: &Path,
    count: usize,
    width: usize,
    height: usize,
    scales: &[usize],
    seed: u64,
) -> DatasetManifest {
    let src = root.join("source");
    std::fs::create_dir_all(&src).unwrap();
    for i in 0..count {
        scene(width, height, seed * 1000 + i as u64)
            .save(src.join(format!("scene_{i:02}.png")))
            .unwrap();
    }
    let options = PrepareOptions {
        scales: scales.to_vec(),
        hr_width: width,
        hr_height: height,
        val_fraction: 0.0,
        seed,
        ..PrepareOptions::default()
    };
    prepare_lr_sets(&src, root.join("data"), &options).unwrap()
}
