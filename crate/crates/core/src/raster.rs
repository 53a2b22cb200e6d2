//! Single-channel floating point rasters and the handful of resampling
//! operations the feature pipeline needs.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::Result;

/// Row-major grayscale image with intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "raster buffer size mismatch");
        Plane {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Sample with mirror reflection at the borders (`dcb|abcd|cba`).
    #[inline]
    pub fn get_reflect(&self, x: isize, y: isize) -> f32 {
        self.get(
            reflect(x, self.width as isize),
            reflect(y, self.height as isize),
        )
    }

    /// Bilinear sample at a continuous position, clamped to the border.
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.width - 1) as f32);
        let y = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    /// Resample to the given size with bilinear interpolation, mapping pixel
    /// centers onto pixel centers.
    pub fn resize(&self, width: usize, height: usize) -> Plane {
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        Plane::from_fn(width, height, |x, y| {
            self.sample((x as f32 + 0.5) * sx - 0.5, (y as f32 + 0.5) * sy - 0.5)
        })
    }

    /// Separable Gaussian blur with reflected borders.
    pub fn gaussian_blur(&self, sigma: f32) -> Plane {
        if sigma <= 0.0 || self.is_empty() {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f32 = kernel.iter().sum();
        let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();

        let horizontal = Plane::from_fn(self.width, self.height, |x, y| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * self.get_reflect(x as isize + i as isize - radius, y as isize))
                .sum()
        });
        Plane::from_fn(self.width, self.height, |x, y| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    k * horizontal.get_reflect(x as isize, y as isize + i as isize - radius)
                })
                .sum()
        })
    }

    /// Shift contents by an integer offset, filling uncovered pixels with `fill`.
    pub fn translate(&self, dx: isize, dy: isize, fill: f32) -> Plane {
        Plane::from_fn(self.width, self.height, |x, y| {
            let sx = x as isize - dx;
            let sy = y as isize - dy;
            if sx < 0 || sy < 0 || sx >= self.width as isize || sy >= self.height as isize {
                fill
            } else {
                self.get(sx as usize, sy as usize)
            }
        })
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Plane {
        Plane::from_fn(width, height, |x, y| {
            let sx = (x0 + x).min(self.width - 1);
            let sy = (y0 + y).min(self.height - 1);
            self.get(sx, sy)
        })
    }

    /// Load PNG/PGM (or anything the `image` crate decodes). Color inputs are
    /// converted with luma weights.
    pub fn load(path: impl AsRef<Path>) -> Result<Plane> {
        let img = image::open(path)?.to_luma8();
        Ok(Self::from_gray(&img))
    }

    pub fn from_gray(img: &GrayImage) -> Plane {
        Plane::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            img.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
        })
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(x as usize, y as usize).clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray().save(path)?;
        Ok(())
    }
}

#[inline]
fn reflect(i: isize, n: isize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn blur_preserves_constant() {
        let p = Plane::filled(9, 7, 0.4);
        let b = p.gaussian_blur(1.3);
        assert!(b.data().iter().all(|v| (v - 0.4).abs() < 1e-5));
    }

    #[test]
    fn resize_identity() {
        let p = Plane::from_fn(8, 5, |x, y| (x * 3 + y) as f32 / 30.0);
        assert_eq!(p.resize(8, 5), p);
    }
}
