//! Dense per-position feature fields.

use crate::error::{Error, Result};

/// A row-major `height x width x channels` field of f32 feature vectors.
///
/// `demodulated` records whether the producer removed the final normalization
/// affine transform, i.e. whether every position vector is expected to have
/// zero mean and norm `sqrt(channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
    demodulated: bool,
}

impl EmbeddingGrid {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height * width * channels;
        if values.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} grid needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
            demodulated: false,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for k in 0..channels {
                    values.push(f(r, c, k));
                }
            }
        }
        Self::new(height, width, channels, values)
    }

    /// Treats an 8-bit RGB raster as a full-resolution 3-channel grid.
    pub fn from_rgb(image: &image::RgbImage) -> Result<Self> {
        let (w, h) = image.dimensions();
        let values = image.as_raw().iter().map(|&v| f32::from(v)).collect();
        Self::new(h as usize, w as usize, 3, values)
    }

    pub fn with_demodulated(mut self, demodulated: bool) -> Self {
        self.demodulated = demodulated;
        self
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn is_demodulated(&self) -> bool {
        self.demodulated
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn vector(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.values[start..start + self.channels]
    }

    /// Iterates position vectors in row-major order.
    pub fn vectors(&self) -> std::slice::ChunksExact<'_, f32> {
        self.values.chunks_exact(self.channels)
    }

    /// Returns a copy with every scalar passed through `f(channel, value)`.
    pub fn map_channels(&self, mut f: impl FnMut(usize, f32) -> f32) -> Result<Self> {
        let channels = self.channels;
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i % channels, v))
            .collect();
        Ok(Self::new(self.height, self.width, channels, values)?.with_demodulated(self.demodulated))
    }

    /// Checks that every position vector has channel mean within `1e-3` of zero
    /// and l2 norm within `1e-2 * sqrt(d)` of `sqrt(d)`.
    ///
    /// Returns the number of violating positions and a description of the first.
    pub fn demodulation_violations(&self) -> (usize, Option<String>) {
        let d = self.channels as f64;
        let target = d.sqrt();
        let mut count = 0;
        let mut first = None;
        for (i, v) in self.vectors().enumerate() {
            let mean = v.iter().map(|&x| f64::from(x)).sum::<f64>() / d;
            let norm = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            if mean.abs() > 1e-3 || (norm - target).abs() > 1e-2 * target {
                count += 1;
                if first.is_none() {
                    first = Some(format!(
                        "position ({}, {}) has mean {mean:.3e} and norm {norm:.4} (expected {target:.4})",
                        i / self.width,
                        i % self.width
                    ));
                }
            }
        }
        (count, first)
    }
}
