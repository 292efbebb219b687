//! Full-reference (PSNR, SSIM) and no-reference (UIQM) image quality
//! measures on 8-bit RGB images, computed in double precision.

mod report;

pub use report::{evaluate_dataset, evaluate_pairs, MetricReport, MetricRow};

use thiserror::Error;

use crate::datakit::ImageRgb8;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Data(#[from] crate::datakit::DataError),
}

fn same_extent(op: &str, a: &ImageRgb8, b: &ImageRgb8) -> Result<(), MetricError> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(MetricError::Contract(format!(
            "{op}: {}x{} and {}x{} images differ in extent",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// `10 log10(255^2 / MSE)` over all channels, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageRgb8, b: &ImageRgb8) -> Result<f64, MetricError> {
    same_extent("psnr", a, b)?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    let mse = sse / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// SSIM window and stabilizing constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 255.0,
        }
    }
}

impl SsimParams {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

/// ITU-R BT.601 luma as `f64`.
pub fn luma(img: &ImageRgb8) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
        .collect()
}

/// Correlates `x` (`h x w`) with the separable window, keeping only positions
/// where the window fits entirely inside the image.
fn filter_valid(x: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &x[y * w..(y + 1) * w];
        for (ox, out) in rows[y * ow..(y + 1) * ow].iter_mut().enumerate() {
            *out = taps.iter().zip(&src[ox..ox + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = taps.iter().enumerate().map(|(i, t)| t * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean structural similarity of two single-channel `w x h` images over every
/// window position that lies fully inside the image.
pub fn ssim_gray(a: &[f64], b: &[f64], width: usize, height: usize, params: &SsimParams) -> Result<f64, MetricError> {
    if a.len() != width * height || b.len() != width * height {
        return Err(MetricError::Contract("ssim: buffers do not match the extent".into()));
    }
    if width < params.window || height < params.window {
        return Err(MetricError::Contract(format!(
            "ssim: {width}x{height} image is smaller than the {0}x{0} window",
            params.window
        )));
    }
    let taps = params.taps();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, width, height, &taps);
    let mu_b = filter_valid(b, width, height, &taps);
    let e_aa = filter_valid(&prod(&|x, _| x * x), width, height, &taps);
    let e_bb = filter_valid(&prod(&|_, y| y * y), width, height, &taps);
    let e_ab = filter_valid(&prod(&|x, y| x * y), width, height, &taps);
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM on luma with the default 11x11 Gaussian window (sigma 1.5).
pub fn ssim(a: &ImageRgb8, b: &ImageRgb8) -> Result<f64, MetricError> {
    same_extent("ssim", a, b)?;
    ssim_gray(&luma(a), &luma(b), a.width(), a.height(), &SsimParams::default())
}

/// UIQM weights and block parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UiqmParams {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub alpha_trim: f64,
    pub block: usize,
}

impl Default for UiqmParams {
    fn default() -> Self {
        UiqmParams {
            c1: 0.0282,
            c2: 0.2953,
            c3: 3.5753,
            alpha_trim: 0.1,
            block: 8,
        }
    }
}

impl UiqmParams {
    pub fn validate(&self) -> Result<(), MetricError> {
        let weights_ok = [self.c1, self.c2, self.c3].iter().all(|w| w.is_finite() && *w > 0.0);
        if !weights_ok || !(0.0..0.5).contains(&self.alpha_trim) || self.block == 0 {
            return Err(MetricError::Contract(format!("invalid UIQM parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Uiqm {
    /// Colorfulness.
    pub uicm: f64,
    /// Sharpness.
    pub uism: f64,
    /// Contrast.
    pub uiconm: f64,
    pub uiqm: f64,
}

/// Alpha-trimmed mean: drops `ceil(alpha K)` smallest and `floor(alpha K)` largest values.
fn trimmed_mean(mut values: Vec<f64>, alpha: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    let lo = (alpha * k as f64).ceil() as usize;
    let hi = (alpha * k as f64).floor() as usize;
    let kept = &values[lo..k - hi];
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn uicm(img: &ImageRgb8, alpha: f64) -> f64 {
    let mut rg = Vec::with_capacity(img.data().len() / 3);
    let mut yb = Vec::with_capacity(img.data().len() / 3);
    for p in img.data().chunks_exact(3) {
        let (r, g, b) = (f64::from(p[0]), f64::from(p[1]), f64::from(p[2]));
        rg.push(r - g);
        yb.push(0.5 * (r + g) - b);
    }
    let variance = |v: &[f64], mu: f64| v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64;
    let mu_rg = trimmed_mean(rg.clone(), alpha);
    let mu_yb = trimmed_mean(yb.clone(), alpha);
    let spread = (variance(&rg, mu_rg) + variance(&yb, mu_yb)).sqrt();
    -0.0268 * mu_rg.hypot(mu_yb) + 0.1586 * spread
}

/// Sobel gradient magnitude with mirrored borders (`a b | b a`).
fn sobel_magnitude(x: &[f64], w: usize, h: usize) -> Vec<f64> {
    let at = |yy: isize, xx: isize| {
        let reflect = |v: isize, n: usize| -> usize {
            if v < 0 {
                (-v - 1) as usize
            } else if v as usize >= n {
                2 * n - 1 - v as usize
            } else {
                v as usize
            }
        };
        x[reflect(yy, h) * w + reflect(xx, w)]
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let gy = (at(y + 1, xx - 1) + 2.0 * at(y + 1, xx) + at(y + 1, xx + 1))
                - (at(y - 1, xx - 1) + 2.0 * at(y - 1, xx) + at(y - 1, xx + 1));
            let gx = (at(y - 1, xx + 1) + 2.0 * at(y, xx + 1) + at(y + 1, xx + 1))
                - (at(y - 1, xx - 1) + 2.0 * at(y, xx - 1) + at(y + 1, xx - 1));
            out[y as usize * w + xx as usize] = gx.hypot(gy);
        }
    }
    out
}

/// Per-block `(max, min)` over `channels` interleaved planes, for every
/// complete `block x block` tile.
fn block_extrema(x: &[f64], w: usize, h: usize, channels: usize, block: usize) -> Vec<(f64, f64)> {
    let (k1, k2) = (w / block, h / block);
    let mut out = Vec::with_capacity(k1 * k2);
    for by in 0..k2 {
        for bx in 0..k1 {
            let mut hi = f64::NEG_INFINITY;
            let mut lo = f64::INFINITY;
            for y in by * block..(by + 1) * block {
                let row = &x[(y * w + bx * block) * channels..(y * w + (bx + 1) * block) * channels];
                for &v in row {
                    hi = hi.max(v);
                    lo = lo.min(v);
                }
            }
            out.push((hi, lo));
        }
    }
    out
}

/// Measure of enhancement: `2 / (k1 k2) * sum log(max / min)` over blocks
/// with non-zero extrema.
fn eme(x: &[f64], w: usize, h: usize, block: usize) -> f64 {
    let blocks = block_extrema(x, w, h, 1, block);
    let n = blocks.len() as f64;
    let sum: f64 = blocks
        .iter()
        .filter(|(hi, lo)| *hi > 0.0 && *lo > 0.0)
        .map(|(hi, lo)| (hi / lo).ln())
        .sum();
    2.0 / n * sum
}

fn uism(img: &ImageRgb8, block: usize) -> f64 {
    let (w, h) = (img.width(), img.height());
    [0.299, 0.587, 0.114]
        .iter()
        .enumerate()
        .map(|(c, weight)| {
            let ch = img.channel_f64(c);
            let mut mag = sobel_magnitude(&ch, w, h);
            let peak = mag.iter().copied().fold(0.0, f64::max);
            if peak > 0.0 {
                let k = 255.0 / peak;
                mag.iter_mut().for_each(|m| *m *= k);
            }
            let edges: Vec<f64> = mag.iter().zip(&ch).map(|(m, v)| m * v).collect();
            weight * eme(&edges, w, h, block)
        })
        .sum()
}

/// Block contrast `-1 / (k1 k2) * sum (d / s) ln(d / s)` with `d = max - min`,
/// `s = max + min` over all three channels of each block.
fn uiconm(img: &ImageRgb8, block: usize) -> f64 {
    let x: Vec<f64> = img.data().iter().map(|&v| f64::from(v)).collect();
    let blocks = block_extrema(&x, img.width(), img.height(), 3, block);
    let n = blocks.len() as f64;
    let sum: f64 = blocks
        .iter()
        .map(|(hi, lo)| (hi - lo, hi + lo))
        .filter(|(d, s)| *d > 0.0 && *s > 0.0)
        .map(|(d, s)| (d / s) * (d / s).ln())
        .sum();
    -sum / n
}

/// UIQM and its colorfulness, sharpness and contrast components.
pub fn uiqm_with(img: &ImageRgb8, params: &UiqmParams) -> Result<Uiqm, MetricError> {
    params.validate()?;
    if img.width() < params.block || img.height() < params.block {
        return Err(MetricError::Contract(format!(
            "uiqm: {}x{} image is smaller than one {}x{} block",
            img.width(),
            img.height(),
            params.block,
            params.block
        )));
    }
    let uicm = uicm(img, params.alpha_trim);
    let uism = uism(img, params.block);
    let uiconm = uiconm(img, params.block);
    Ok(Uiqm {
        uicm,
        uism,
        uiconm,
        uiqm: params.c1 * uicm + params.c2 * uism + params.c3 * uiconm,
    })
}

pub fn uiqm(img: &ImageRgb8) -> Result<Uiqm, MetricError> {
    uiqm_with(img, &UiqmParams::default())
}
