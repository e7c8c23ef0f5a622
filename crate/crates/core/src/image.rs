//! Planar real-valued image carrier used for clean images, noised states and
//! conditions alike.

use crate::error::{DpiError, Result};

const MODULE: &str = "image";

/// Rec. 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// An `H x W x C` image stored channel-planar (`data[c*H*W + i*W + j]`).
///
/// Clean images and conditions live in `[-1, 1]`; noised diffusion states are
/// unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height >= 1 && width >= 1 && channels >= 1, "empty image");
        ImageTensor { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(DpiError::shape(MODULE, "dimensions must be >= 1"));
        }
        if data.len() != height * width * channels {
            return Err(DpiError::shape(
                MODULE,
                format!("{} values for a {height}x{width}x{channels} image", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DpiError::data(MODULE, "non-finite pixel value"));
        }
        Ok(ImageTensor { height, width, channels, data })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::zeros(height, width, channels);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    img.data[(c * height + i) * width + j] = f(i, j, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: f64) {
        self.data[(c * self.height + i) * self.width + j] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &ImageTensor, module: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(DpiError::shape(
                module,
                format!("{:?} vs {:?} (H, W, C)", self.shape(), other.shape()),
            ))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    /// Elementwise combination; panics on shape mismatch (callers check first).
    pub fn zip_map(&self, other: &ImageTensor, f: impl Fn(f64, f64) -> f64) -> ImageTensor {
        assert!(self.same_shape(other), "zip_map shape mismatch");
        ImageTensor {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            ..*self
        }
    }

    /// `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, other: &ImageTensor, b: f64) -> ImageTensor {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> ImageTensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Single-channel luminance; a 1-channel image is returned unchanged.
    pub fn luminance(&self) -> ImageTensor {
        match self.channels {
            1 => self.clone(),
            3 => {
                let n = self.height * self.width;
                let mut out = ImageTensor::zeros(self.height, self.width, 1);
                for p in 0..n {
                    out.data[p] = LUMA[0] * self.data[p]
                        + LUMA[1] * self.data[n + p]
                        + LUMA[2] * self.data[2 * n + p];
                }
                out
            }
            c => {
                // Channel average for unusual layouts.
                let n = self.height * self.width;
                let mut out = ImageTensor::zeros(self.height, self.width, 1);
                for p in 0..n {
                    out.data[p] = (0..c).map(|k| self.data[k * n + p]).sum::<f64>() / c as f64;
                }
                out
            }
        }
    }
}

impl std::ops::Add for &ImageTensor {
    type Output = ImageTensor;
    fn add(self, rhs: &ImageTensor) -> ImageTensor {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl std::ops::Sub for &ImageTensor {
    type Output = ImageTensor;
    fn sub(self, rhs: &ImageTensor) -> ImageTensor {
        self.zip_map(rhs, |a, b| a - b)
    }
}

/// Mean squared error between two equally shaped images.
pub fn mse(a: &ImageTensor, b: &ImageTensor) -> f64 {
    assert!(a.same_shape(b));
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_indexing() {
        let img = ImageTensor::from_fn(2, 3, 2, |i, j, c| (100 * c + 10 * i + j) as f64);
        assert_eq!(img.get(1, 2, 1), 112.0);
        assert_eq!(img.plane(1)[0], 100.0);
        assert_eq!(img.data()[5], 12.0);
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(ImageTensor::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageTensor::from_vec(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn luminance_of_gray_rgb_is_gray() {
        let img = ImageTensor::filled(2, 2, 3, 0.4);
        let l = img.luminance();
        assert_eq!(l.channels(), 1);
        assert!(l.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }
}
