//! Float RGB images and stacked frame windows, both channel-last.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// An RGB image with values nominally in `[0, 1]`, laid out `(H, W, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::zeros(height, width);
        for px in img.data.chunks_exact_mut(CHANNELS) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::Shape(alloc::format!(
                "{} values for a {height}x{width} RGB image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Whether the continuous coordinate `(x, y)` lies on the image, where
    /// pixel `(i, j)` covers `[j - 0.5, j + 0.5) × [i - 0.5, i + 0.5)`.
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= -0.5 && y >= -0.5 && x < self.width as f64 - 0.5 && y < self.height as f64 - 0.5
    }

    /// Bilinear sample at pixel-center coordinates, clamping to the edge.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f32; 3] {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = libm::floor(xc) as usize;
        let y0 = libm::floor(yc) as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (xc - x0 as f64) as f32;
        let fy = (yc - y0 as f64) as f32;
        let p00 = self.pixel(y0, x0);
        let p01 = self.pixel(y0, x1);
        let p10 = self.pixel(y1, x0);
        let p11 = self.pixel(y1, x1);
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let top = p00[c] + (p01[c] - p00[c]) * fx;
            let bottom = p10[c] + (p11[c] - p10[c]) * fx;
            out[c] = top + (bottom - top) * fy;
        }
        out
    }

    /// Resample the whole image to `size × size` with bilinear filtering.
    pub fn resize(&self, size: usize) -> Image {
        let mut out = Image::zeros(size, size);
        let sx = self.width as f64 / size as f64;
        let sy = self.height as f64 / size as f64;
        for i in 0..size {
            let y = (i as f64 + 0.5) * sy - 0.5;
            for j in 0..size {
                let x = (j as f64 + 0.5) * sx - 0.5;
                out.set_pixel(i, j, self.sample_bilinear(x, y));
            }
        }
        out
    }
}

/// A stack of `frames` equally sized images, laid out `(T, H, W, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowTensor {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl WindowTensor {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width * CHANNELS],
        }
    }

    pub fn from_frames(frames: &[Image]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("window needs at least one frame".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(frames.len() * h * w * CHANNELS);
        for f in frames {
            if f.height != h || f.width != w {
                return Err(Error::Shape(alloc::format!(
                    "frame {}x{} in a {h}x{w} window",
                    f.height, f.width
                )));
            }
            data.extend_from_slice(&f.data);
        }
        Ok(Self {
            frames: frames.len(),
            height: h,
            width: w,
            data,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn frame(&self, t: usize) -> Image {
        let n = self.frame_len();
        Image {
            height: self.height,
            width: self.width,
            data: self.data[t * n..(t + 1) * n].to_vec(),
        }
    }

    pub fn frame_slice(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_slice_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_to_same_size_is_identity() {
        let data = (0..4 * 5 * 3).map(|i| i as f32 / 60.0).collect();
        let img = Image::from_data(5, 4, data).unwrap();
        let out = img.resize(4);
        assert_eq!(out.height, 4);
        let img4 = Image::from_data(4, 4, (0..48).map(|i| i as f32 / 48.0).collect()).unwrap();
        assert_eq!(img4.resize(4), img4);
    }
}
