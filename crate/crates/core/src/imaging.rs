//! RGB images in `[0, 1]`, PNG I/O, and the few raster primitives the
//! renderer and the perturbations need.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Result, ScingError};
use crate::tensor::Tensor;

/// Row-major `height x width x 3` image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(ScingError::shape(
                "Image::from_raw",
                format!("{} values", height * width * 3),
                data.len(),
            ));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn fill_rect(&mut self, y0: usize, x0: usize, h: usize, w: usize, rgb: [f32; 3]) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                self.set_pixel(y, x, rgb);
            }
        }
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Bilinear resample of the window `(y0, x0, h, w)` back to the full size.
    pub fn crop_resize(&self, y0: usize, x0: usize, h: usize, w: usize) -> Image {
        let mut out = self.clone();
        let (oh, ow) = (self.height, self.width);
        for y in 0..oh {
            let sy = (y as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let y_lo = sy.floor() as usize;
            let y_hi = (y_lo + 1).min(h - 1);
            let fy = (sy - y_lo as f64) as f32;
            for x in 0..ow {
                let sx = (x as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
                let sx = sx.clamp(0.0, (w - 1) as f64);
                let x_lo = sx.floor() as usize;
                let x_hi = (x_lo + 1).min(w - 1);
                let fx = (sx - x_lo as f64) as f32;
                let p00 = self.pixel(y0 + y_lo, x0 + x_lo);
                let p01 = self.pixel(y0 + y_lo, x0 + x_hi);
                let p10 = self.pixel(y0 + y_hi, x0 + x_lo);
                let p11 = self.pixel(y0 + y_hi, x0 + x_hi);
                let mut rgb = [0.0f32; 3];
                for c in 0..3 {
                    let top = p00[c] * (1.0 - fx) + p01[c] * fx;
                    let bottom = p10[c] * (1.0 - fx) + p11[c] * fx;
                    rgb[c] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
                }
                out.set_pixel(y, x, rgb);
            }
        }
        out
    }

    /// Number of pixels whose RGB triple differs from `other`.
    pub fn count_changed_pixels(&self, other: &Image) -> usize {
        self.data
            .chunks_exact(3)
            .zip(other.data.chunks_exact(3))
            .filter(|(a, b)| a != b)
            .count()
    }

    /// Non-overlapping `patch x patch` tiles in raster order, each flattened
    /// as `(row, col, channel)` and mapped from `[0,1]` to `[-1,1]`.
    pub fn patches(&self, patch: usize) -> Tensor {
        let ph = self.height / patch;
        let pw = self.width / patch;
        let len = patch * patch * 3;
        let mut out = Tensor::zeros(ph * pw, len);
        for py in 0..ph {
            for px in 0..pw {
                let row = out.row_mut(py * pw + px);
                let mut k = 0;
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let base = (y * self.width + px * patch) * 3;
                    for v in &self.data[base..base + patch * 3] {
                        row[k] = 2.0 * f64::from(*v) - 1.0;
                        k += 1;
                    }
                }
            }
        }
        out
    }

    /// Quantizes to 8 bits per channel.
    pub fn to_rgb8(&self) -> RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .flat_map(|p| p.0.map(|v| f32::from(v) / 255.0))
            .collect();
        Image {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => ScingError::io(path, io),
                other => ScingError::Data(format!("{}: {other}", path.display())),
            })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => ScingError::io(path, io),
            other => ScingError::Data(format!("{}: {other}", path.display())),
        })?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_are_raster_ordered() {
        let mut img = Image::filled(4, 4, [0.0; 3]);
        img.set_pixel(2, 3, [1.0, 1.0, 1.0]);
        let p = img.patches(2);
        assert_eq!(p.shape(), (4, 12));
        // pixel (2,3) is in patch (1,1) = index 3, local (0,1) -> offset 3
        assert_eq!(p.get(3, 3), 1.0);
        assert_eq!(p.get(0, 0), -1.0);
    }

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::filled(6, 4, [0.0; 3]);
        img.set_pixel(1, 2, [1.0, 128.0 / 255.0, 3.0 / 255.0]);
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn full_window_crop_is_identity() {
        let mut img = Image::filled(8, 4, [0.25; 3]);
        img.set_pixel(3, 1, [0.9, 0.1, 0.4]);
        let out = img.crop_resize(0, 0, 8, 4);
        assert_eq!(out, img);
    }
}
