//! Single-channel image representation, contrast enhancement and resampling.
//!
//! All processing happens on normalized luminance in `[0, 1]`; images are
//! quantized to 8 bits only at the storage boundary (see [`pnm`]).

mod clahe;
pub mod pnm;
mod resample;

pub use clahe::{
    bin_of, clahe, clip_redistribute, compute_histogram, equalization_map, ClaheParams, Histogram, Rect,
    HISTOGRAM_BINS,
};
pub use resample::{lanczos3_kernel, resize, ResampleFilter, LANCZOS_SUPPORT};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImagingError {
    #[error("invalid image dimensions {width}x{height}")]
    Dimensions { width: usize, height: usize },
    #[error("pixel buffer holds {actual} values, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("pixel {index} has value {value} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("region {region:?} exceeds {width}x{height} image bounds")]
    Bounds {
        region: Rect,
        width: usize,
        height: usize,
    },
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// Grayscale raster with row-major luminance in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::Dimensions { width, height });
        }
        if pixels.len() != width * height {
            return Err(ImagingError::BufferSize {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        if let Some((index, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImagingError::OutOfRange { index, value });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image by clamping every value into `[0, 1]`. NaN maps to 0.
    pub fn from_clamped(
        width: usize,
        height: usize,
        pixels: Vec<f64>,
    ) -> Result<Self, ImagingError> {
        let pixels = pixels
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self, ImagingError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, ImagingError> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::from_clamped(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dimensions(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Population standard deviation of the pixel values.
    pub fn std_dev(&self) -> f64 {
        let mean = self.mean();
        let var = self.pixels.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / self.pixels.len() as f64;
        var.sqrt()
    }

    /// 8-bit quantization, rounding `v * 255` half away from zero.
    pub fn quantize(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize_value(v)).collect()
    }

    pub fn dequantize(width: usize, height: usize, raster: &[u8]) -> Result<Self, ImagingError> {
        Self::new(
            width,
            height,
            raster.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }
}

#[inline]
pub fn quantize_value(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
