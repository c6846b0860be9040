//! Floating-point images and PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Mask;

/// A dense image with interleaved channels (`HWC`), nominal range `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimension(format!("image {height}x{width}x{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, pixel: &[f64]) -> Result<Self> {
        let data = pixel.iter().copied().cycle().take(height * width * pixel.len()).collect();
        Self::new(height, width, pixel.len(), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = (row * self.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Luma with weights 0.299 / 0.587 / 0.114; single-channel images pass through.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantize_u8(&self) -> Image {
        let data = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        Image { data, ..self.clone() }
    }

    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.channels != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", self.channels)));
        }
        let bytes = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("rgb buffer size".into()))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Image {
            height: img.height() as usize,
            width: img.width() as usize,
            channels: 3,
            data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        match self.channels {
            3 => self.to_rgb8()?.save(path)?,
            1 => {
                let bytes =
                    self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
                image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
                    .ok_or_else(|| Error::Shape("gray buffer size".into()))?
                    .save(path)?
            }
            c => return Err(Error::Shape(format!("cannot save {c}-channel image as PNG"))),
        }
        Ok(())
    }

    /// Loads any PNG as 8-bit RGB.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }
}

pub fn save_mask_png(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.to_u8())
        .ok_or_else(|| Error::Shape("mask buffer size".into()))?
        .save(path.as_ref())?;
    Ok(())
}

pub fn load_mask_png(path: impl AsRef<Path>) -> Result<Mask> {
    let img = image::open(path.as_ref())?.to_luma8();
    Mask::from_u8(img.height() as usize, img.width() as usize, img.as_raw())
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    Ok(taps)
}

/// Reflect-101 index (`dcb|abcd|cba`) for out-of-range positions.
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Separable Gaussian blur with reflect padding, channel by channel.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    let taps = gaussian_kernel(sigma)?;
    let radius = (taps.len() / 2) as i64;
    let (h, w, ch) = (img.height, img.width, img.channels);
    let mut tmp = vec![0.0; img.data.len()];
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut acc = 0.0;
                for (t, tap) in taps.iter().enumerate() {
                    let cc = reflect(c as i64 + t as i64 - radius, w);
                    acc += tap * img.data[(r * w + cc) * ch + k];
                }
                tmp[(r * w + c) * ch + k] = acc;
            }
        }
    }
    let mut out = vec![0.0; img.data.len()];
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut acc = 0.0;
                for (t, tap) in taps.iter().enumerate() {
                    let rr = reflect(r as i64 + t as i64 - radius, h);
                    acc += tap * tmp[(rr * w + c) * ch + k];
                }
                out[(r * w + c) * ch + k] = acc;
            }
        }
    }
    Image::new(h, w, ch, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-7, 1), 0);
    }

    #[test]
    fn kernel_radius_and_mass() {
        let k = gaussian_kernel(2.0).unwrap();
        assert_eq!(k.len(), 13);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(-1.0).is_err());
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let img = Image::filled(7, 9, &[0.25, 0.5, 0.75]).unwrap();
        let b = gaussian_blur(&img, 1.3).unwrap();
        for (x, y) in img.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn png_round_trip_is_exact_for_quantized_images() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..4 * 5 * 3).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let img = Image::new(4, 5, 3, data).unwrap();
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);
    }

    #[test]
    fn luma_weights() {
        let img = Image::filled(1, 1, &[1.0, 0.0, 0.0]).unwrap();
        assert!((img.to_gray().data()[0] - 0.299).abs() < 1e-15);
    }
}
