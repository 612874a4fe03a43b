//! In-memory RGB image buffer shared by the sampler and the encoder.

use crate::error::{IqaError, Result};
use crate::grid::ImageDims;

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(IqaError::InvalidConfig(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(IqaError::shape("image buffer", width * height * 3, data.len()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image from 8-bit interleaved RGB samples.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(width, height, data)
    }

    pub fn from_fn<F>(width: usize, height: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> [f32; 3],
    {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims {
            width: self.width,
            height: self.height,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Quantizes to 8-bit interleaved RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// A square `size x size` RGB window cut from an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    /// Top-left corner in the source image.
    pub origin: (usize, usize),
    pub data: Vec<f32>,
}

impl Patch {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if size == 0 || data.len() != size * size * 3 {
            return Err(IqaError::shape("patch buffer", size * size * 3, data.len()));
        }
        Ok(Self {
            size,
            origin: (0, 0),
            data,
        })
    }

    pub fn from_fn<F>(size: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize) -> [f32; 3],
    {
        let mut data = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            size,
            origin: (0, 0),
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.size + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}
