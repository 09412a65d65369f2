//! Channel-first `f32` images and the resampling used by augmentations.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `channels × height × width`, row-major per channel.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!("{}x{}x{} needs {} values, got {}", channels, height, width, channels * height * width, data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Axis-aligned crop `[top, top+h) × [left, left+w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "crop {}x{} at ({}, {}) exceeds {}x{} image",
                h, w, top, left, self.height, self.width
            )));
        }
        let mut out = Image::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                let src = ((c * self.height + top + y) * self.width) + left;
                let dst = (c * h + y) * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(out)
    }

    /// Bilinear resampling with half-pixel centers.
    pub fn resize(&self, h: usize, w: usize) -> Image {
        if h == self.height && w == self.width {
            return self.clone();
        }
        self.resize_region(0.0, 0.0, self.height as f64, self.width as f64, h, w)
    }

    /// Bilinear resampling of the (possibly fractional) source window
    /// `[top, top+src_h) × [left, left+src_w)` onto an `h × w` grid.
    pub fn resize_region(&self, top: f64, left: f64, src_h: f64, src_w: f64, h: usize, w: usize) -> Image {
        let mut out = Image::zeros(self.channels, h, w);
        let sy = src_h / h as f64;
        let sx = src_w / w as f64;
        let ymax = (self.height - 1) as f64;
        let xmax = (self.width - 1) as f64;
        for y in 0..h {
            let fy = (top + (y as f64 + 0.5) * sy - 0.5).clamp(0.0, ymax);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for x in 0..w {
                let fx = (left + (x as f64 + 0.5) * sx - 0.5).clamp(0.0, xmax);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = (fx - x0 as f64) as f32;
                for c in 0..self.channels {
                    let a = self.get(c, y0, x0) * (1.0 - wx) + self.get(c, y0, x1) * wx;
                    let b = self.get(c, y1, x0) * (1.0 - wx) + self.get(c, y1, x1) * wx;
                    out.set(c, y, x, a * (1.0 - wy) + b * wy);
                }
            }
        }
        out
    }
}

/// Single-channel 8-bit label raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask", format!("{}x{} needs {} values", height, width, height * width)));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Nearest-neighbour resampling onto `h × w` (labels must not blend).
    pub fn resize_nearest(&self, h: usize, w: usize) -> Mask {
        self.resize_region_nearest(0.0, 0.0, self.height as f64, self.width as f64, h, w)
    }

    pub fn resize_region_nearest(&self, top: f64, left: f64, src_h: f64, src_w: f64, h: usize, w: usize) -> Mask {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = ((top + (y as f64 + 0.5) * src_h / h as f64).floor() as isize).clamp(0, self.height as isize - 1) as usize;
            for x in 0..w {
                let sx = ((left + (x as f64 + 0.5) * src_w / w as f64).floor() as isize).clamp(0, self.width as isize - 1) as usize;
                data.push(self.get(sy, sx));
            }
        }
        Mask { height: h, width: w, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::new(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(img.resize(2, 2), img);
        let flat = Image::new(3, 4, 4, vec![0.5; 48]).unwrap();
        assert!(flat.resize(7, 5).data.iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn crop_bounds() {
        let img = Image::zeros(3, 8, 8);
        assert!(img.crop(4, 4, 4, 4).is_ok());
        assert!(img.crop(5, 0, 4, 4).is_err());
    }

    #[test]
    fn nearest_mask_upsampling_repeats_cells() {
        let m = Mask::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let up = m.resize_nearest(4, 4);
        assert_eq!(up.data, vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
    }
}
