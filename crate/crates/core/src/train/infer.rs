use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::datakit::{DatasetManifest, ImageRgb8, Split};
use crate::metrics::{evaluate_pairs, MetricReport};
use crate::model::Generator;
use crate::tensor::{Shape4, Tensor4};

/// Smallest region of interest side accepted by [`infer`].
pub const MIN_ROI_SIDE: usize = 8;

/// Region of interest `(x, y, w, h)` in input pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl FromStr for Roi {
    type Err = TrainError;

    /// Parses `X,Y,W,H`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| TrainError::Config(format!("roi must be X,Y,W,H with non-negative integers, got {s}")))?;
        match parts[..] {
            [x, y, width, height] => Ok(Roi { x, y, width, height }),
            _ => Err(TrainError::Config(format!("roi must have four fields, got {s}"))),
        }
    }
}

impl Roi {
    pub fn check(&self, width: usize, height: usize) -> Result<(), TrainError> {
        if self.width < MIN_ROI_SIDE || self.height < MIN_ROI_SIDE {
            return Err(TrainError::Config(format!(
                "roi {}x{} is smaller than {MIN_ROI_SIDE}x{MIN_ROI_SIDE}",
                self.width, self.height
            )));
        }
        if self.x + self.width > width || self.y + self.height > height {
            return Err(TrainError::Config(format!(
                "roi {},{},{},{} exceeds the {width}x{height} input",
                self.x, self.y, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Super-resolves `img` (or its region of interest) with `generator`.
pub fn upscale(generator: &Generator<f32>, img: &ImageRgb8, roi: Option<Roi>) -> Result<ImageRgb8, TrainError> {
    let src = match roi {
        Some(r) => {
            r.check(img.width(), img.height())?;
            img.crop(r.x, r.y, r.width, r.height)?
        }
        None => img.clone(),
    };
    let out = generator.forward(&src.to_tensor())?;
    Ok(ImageRgb8::from_tensor(&out, 0)?)
}

/// Loads the input and checks the ROI before touching the checkpoint, then
/// writes the `2^n`-times larger result to `output`.
pub fn infer(
    ckpt: impl AsRef<Path>,
    input: impl AsRef<Path>,
    roi: Option<Roi>,
    output: impl AsRef<Path>,
) -> Result<ImageRgb8, TrainError> {
    let img = ImageRgb8::load(input)?;
    if let Some(r) = roi {
        r.check(img.width(), img.height())?;
    }
    let generator = Generator::load_inferred(ckpt)?;
    let out = upscale(&generator, &img, roi)?;
    out.save(output)?;
    Ok(out)
}

/// Runs the generator on every LR image of `split` at the generator's scale
/// and scores the results against the HR images.
pub fn eval_report(
    generator: &Generator<f32>,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<MetricReport, TrainError> {
    let scale = generator.config().scale();
    let pairs = manifest.pairs(split, scale)?;
    let mut scored = Vec::with_capacity(pairs.len());
    for (entry, (lr, hr)) in manifest.split(split).iter().zip(&pairs) {
        let out = upscale(generator, &ImageRgb8::load(lr)?, None)?;
        scored.push((entry.id.clone(), out, ImageRgb8::load(hr)?));
    }
    Ok(evaluate_pairs(&scored, Some(scale))?)
}

/// [`eval_report`] from a checkpoint file.
pub fn eval_checkpoint(
    ckpt: impl AsRef<Path>,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<MetricReport, TrainError> {
    eval_report(&Generator::load_inferred(ckpt)?, manifest, split)
}

/// Iterations run before timing starts.
pub const BENCH_WARMUP: usize = 2;
pub const MIN_BENCH_ITERS: usize = 10;

/// Per-frame latency statistics in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub width: usize,
    pub height: usize,
    pub scale: usize,
    pub iters: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
}

impl BenchReport {
    fn from_samples(width: usize, height: usize, scale: usize, mut ms: Vec<f64>) -> Self {
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let mean = ms.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            ms[n / 2]
        } else {
            0.5 * (ms[n / 2 - 1] + ms[n / 2])
        };
        // Nearest-rank percentile.
        let p95 = ms[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        BenchReport {
            width,
            height,
            scale,
            iters: n,
            mean_ms: mean,
            median_ms: median,
            p95_ms: p95,
            fps: 1000.0 / mean,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "input {}x{} -> {}x{} ({}x), {} iterations",
            self.width,
            self.height,
            self.width * self.scale,
            self.height * self.scale,
            self.scale,
            self.iters
        );
        let _ = writeln!(
            out,
            "mean {:.3} ms  median {:.3} ms  p95 {:.3} ms  {:.2} fps",
            self.mean_ms, self.median_ms, self.p95_ms, self.fps
        );
        out
    }

    /// Header and one data row: `width,height,scale,iters,mean_ms,median_ms,p95_ms,fps`.
    pub fn to_csv(&self) -> String {
        format!(
            "width,height,scale,iters,mean_ms,median_ms,p95_ms,fps\n{},{},{},{},{},{},{},{}\n",
            self.width, self.height, self.scale, self.iters, self.mean_ms, self.median_ms, self.p95_ms, self.fps
        )
    }
}

/// Times `iters` forward passes on a fixed random `width x height` input.
pub fn bench(generator: &Generator<f32>, width: usize, height: usize, iters: usize) -> Result<BenchReport, TrainError> {
    if iters < MIN_BENCH_ITERS {
        return Err(TrainError::Config(format!(
            "bench needs at least {MIN_BENCH_ITERS} iterations, got {iters}"
        )));
    }
    if width == 0 || height == 0 {
        return Err(TrainError::Config("bench input must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor4::from_fn(Shape4::new(1, 3, height, width), |_| rng.random_range(-1.0f32..1.0));
    for _ in 0..BENCH_WARMUP {
        generator.forward(&x)?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        std::hint::black_box(generator.forward(&x)?);
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchReport::from_samples(
        width,
        height,
        generator.config().scale(),
        samples,
    ))
}

/// [`bench`] from a checkpoint file.
pub fn bench_checkpoint(
    ckpt: impl AsRef<Path>,
    width: usize,
    height: usize,
    iters: usize,
) -> Result<BenchReport, TrainError> {
    bench(&Generator::load_inferred(ckpt)?, width, height, iters)
}
