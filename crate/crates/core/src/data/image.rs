use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Real, Tensor};

/// `H x W x Ch` intensity image, row-major with interleaved channels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(shape_err(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(shape_err(format!(
                "{} pixel values for {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidInput("pixel values must be finite and within [0, 1]".into()));
        }
        Ok(Self { height, width, channels, pixels })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, pixels: vec![value; height * width * channels] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    /// Copies the `h x w` window whose top-left corner is `(top, left)`.
    pub fn window(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(shape_err(format!(
                "window {h}x{w} at ({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(h * w * self.channels);
        for y in top..top + h {
            let start = (y * self.width + left) * self.channels;
            pixels.extend_from_slice(&self.pixels[start..start + w * self.channels]);
        }
        Ok(Image { height: h, width: w, channels: self.channels, pixels })
    }

    /// Rounds every value to the nearest 8-bit level, as stored on disk.
    pub fn quantize(&mut self) {
        for v in &mut self.pixels {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, channels, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        image::save_buffer(path, &self.to_u8(), self.width as u32, self.height as u32, color)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img.color().channel_count() {
            1 | 2 => Self::from_u8(h, w, 1, img.to_luma8().as_raw()),
            _ => Self::from_u8(h, w, 3, img.to_rgb8().as_raw()),
        }
    }
}

/// Stacks equally sized images into a channel-major network input.
pub fn images_to_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| shape_err("empty image batch"))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    if images.iter().any(|im| im.height != h || im.width != w || im.channels != c) {
        return Err(shape_err("batch images must share one shape"));
    }
    let n = images.len();
    let mut t = Tensor::zeros(c, n, h, w);
    for (b, im) in images.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let i = t.idx(ch, b, y, x);
                    t.data[i] = T::lit(im.get(y, x, ch) as f64);
                }
            }
        }
    }
    Ok(t)
}
