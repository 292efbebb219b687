use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::imageops::{self, FilterType};
use image::{ExtendedColorType, ImageFormat, RgbImage};

use super::DataError;
use crate::tensor::{Shape4, Tensor4};

/// 8-bit RGB image, interleaved, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRgb8 {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageRgb8 {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, DataError> {
        if width == 0 || height == 0 {
            return Err(DataError::Contract(format!("image extent {width}x{height} is empty")));
        }
        if data.len() != width * height * 3 {
            return Err(DataError::Contract(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(ImageRgb8 { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data).expect("non-empty extent")
    }

    /// Builds an image from `f(x, y) -> [r, g, b]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data).expect("non-empty extent")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// One channel as `f64`, row-major.
    pub fn channel_f64(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).map(|&v| f64::from(v)).collect()
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Self, DataError> {
        if width == 0 || height == 0 || x + width > self.width || y + height > self.height {
            return Err(DataError::Contract(format!(
                "region {width}x{height}+{x}+{y} is outside the {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for row in y..y + height {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Self::new(width, height, data)
    }

    fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone()).expect("consistent buffer")
    }

    fn from_rgb_image(img: RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw()).expect("decoded images are non-empty")
    }

    /// Bicubic (Catmull-Rom) resize.
    pub fn resize_bicubic(&self, width: usize, height: usize) -> Self {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        Self::from_rgb_image(imageops::resize(
            &self.to_rgb_image(),
            width as u32,
            height as u32,
            FilterType::CatmullRom,
        ))
    }

    /// Round trip through an in-memory baseline JPEG at `quality`.
    pub fn jpeg_round_trip(&self, quality: u8) -> Result<Self, DataError> {
        let mut buf = Vec::new();
        JpegEncoder::new_with_quality(&mut buf, quality)
            .encode(
                &self.data,
                self.width as u32,
                self.height as u32,
                ExtendedColorType::Rgb8,
            )
            .map_err(|e| DataError::Contract(format!("jpeg encoding failed: {e}")))?;
        let img = image::load(Cursor::new(buf), ImageFormat::Jpeg)
            .map_err(|e| DataError::Contract(format!("jpeg decoding failed: {e}")))?;
        Ok(Self::from_rgb_image(img.to_rgb8()))
    }

    /// Reads a PNG or JPEG file; other channel layouts are converted to RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| DataError::image(path, e))?;
        Ok(Self::from_rgb_image(img.to_rgb8()))
    }

    /// Writes the image; the format follows the extension (`.png`, `.jpg`, `.jpeg`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let format = ImageFormat::from_path(path).map_err(|e| DataError::image(path, e))?;
        self.to_rgb_image()
            .save_with_format(path, format)
            .map_err(|e| DataError::image(path, e))
    }

    /// `(1, 3, h, w)` tensor with `v / 127.5 - 1`, so 0 maps to -1 and 255 to +1.
    pub fn to_tensor(&self) -> Tensor4<f32> {
        let (w, h) = (self.width, self.height);
        let plane = w * h;
        Tensor4::from_fn(Shape4::new(1, 3, h, w), |i| {
            let (c, p) = (i / plane, i % plane);
            f32::from(self.data[p * 3 + c]) / 127.5 - 1.0
        })
    }

    /// Inverse of [`ImageRgb8::to_tensor`] for sample `index`: `(v + 1) * 127.5`
    /// rounded half away from zero and clamped to `[0, 255]`.
    pub fn from_tensor(t: &Tensor4<f32>, index: usize) -> Result<Self, DataError> {
        let s = t.shape();
        if s.channels != 3 || index >= s.batch {
            return Err(DataError::Contract(format!(
                "cannot take RGB image {index} from a {s} tensor"
            )));
        }
        let plane = s.plane();
        let sample = t.sample(index);
        let mut data = vec![0u8; plane * 3];
        for c in 0..3 {
            for (p, &v) in sample[c * plane..(c + 1) * plane].iter().enumerate() {
                data[p * 3 + c] = denormalize(v);
            }
        }
        Self::new(s.width, s.height, data)
    }
}

pub(crate) fn denormalize(v: f32) -> u8 {
    let scaled = ((f64::from(v) + 1.0) * 127.5).round();
    if scaled.is_nan() {
        0
    } else {
        scaled.clamp(0.0, 255.0) as u8
    }
}

/// Stacks equally sized images into one `(n, 3, h, w)` batch.
pub fn images_to_tensor(images: &[&ImageRgb8]) -> Result<Tensor4<f32>, DataError> {
    let first = images
        .first()
        .ok_or_else(|| DataError::Contract("cannot batch zero images".into()))?;
    if let Some(odd) = images
        .iter()
        .find(|i| (i.width, i.height) != (first.width, first.height))
    {
        return Err(DataError::Contract(format!(
            "batch mixes {}x{} and {}x{} images",
            first.width, first.height, odd.width, odd.height
        )));
    }
    let tensors: Vec<_> = images.iter().map(|i| i.to_tensor()).collect();
    Ok(Tensor4::stack(&tensors)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversion_endpoints() {
        let img = ImageRgb8::new(3, 1, vec![0, 0, 0, 255, 255, 255, 128, 128, 128]).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.at(0, 0, 0, 0), -1.0);
        assert_eq!(t.at(0, 1, 0, 1), 1.0);
        assert!((f64::from(t.at(0, 2, 0, 2)) - (2.0 * 128.0 / 255.0 - 1.0)).abs() < 1e-7);
    }

    #[test]
    fn round_trip_is_lossless_for_every_value() {
        let img = ImageRgb8::from_fn(256, 1, |x, _| [x as u8, 255 - x as u8, (x * 7 % 256) as u8]);
        assert_eq!(ImageRgb8::from_tensor(&img.to_tensor(), 0).unwrap(), img);
    }

    #[test]
    fn denormalize_rounds_half_away_and_clamps() {
        assert_eq!(denormalize(-2.0), 0);
        assert_eq!(denormalize(3.0), 255);
        assert_eq!(denormalize(f32::NAN), 0);
        // 0 maps to exactly 127.5, which rounds up.
        assert_eq!(denormalize(0.0), 128);
    }

    #[test]
    fn crop_bounds() {
        let img = ImageRgb8::from_fn(10, 8, |x, y| [x as u8, y as u8, 0]);
        let c = img.crop(2, 3, 4, 5).unwrap();
        assert_eq!((c.width(), c.height()), (4, 5));
        assert_eq!(c.pixel(0, 0), [2, 3, 0]);
        assert!(img.crop(7, 0, 4, 2).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageRgb8::from_fn(9, 5, |x, y| [(x * 20) as u8, (y * 40) as u8, 7]);
        let p = dir.path().join("a.png");
        img.save(&p).unwrap();
        assert_eq!(ImageRgb8::load(&p).unwrap(), img);
    }
}
