//! Image tensors and PNG round-tripping.
//!
//! Images are `(channels, height, width)` arrays of `f64` in `[0, 1]`;
//! 1 channel (gray / alpha masks) or 3 channels (RGB). Files are 8-bit PNG,
//! so a save/load round trip moves each value by at most 1/255.

use crate::error::{LmqError, Result};
use ndarray::Array3;
use std::path::Path;

/// Minimum spatial extent accepted anywhere in the pipeline.
pub const MIN_SIDE: usize = 8;

/// An image in `(c, h, w)` layout, values in `[0, 1]`, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    /// Validates range, channel count and minimum size.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 1 && c != 3 {
            return Err(LmqError::invalid(format!(
                "image must have 1 or 3 channels, got {c}"
            )));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(LmqError::invalid(format!(
                "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}"
            )));
        }
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(LmqError::invalid(format!(
                    "image values must be finite and in [0,1], found {v}"
                )));
            }
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Loads an 8-bit PNG (or any format the `image` crate sniffs) as RGB
    /// unless the file is single-channel gray.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let tensor = match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                let mut data = Array3::zeros((1, h as usize, w as usize));
                for (x, y, p) in g.enumerate_pixels() {
                    data[[0, y as usize, x as usize]] = p.0[0] as f64 / 255.0;
                }
                data
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                let mut data = Array3::zeros((3, h as usize, w as usize));
                for (x, y, p) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        data[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
                    }
                }
                data
            }
        };
        Self::new(tensor)
    }

    /// Saves as 8-bit PNG; gray for 1 channel, RGB for 3.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (c, h, w) = self.data.dim();
        let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        if c == 1 {
            let mut buf = image::GrayImage::new(w as u32, h as u32);
            for (x, y, p) in buf.enumerate_pixels_mut() {
                p.0[0] = quant(self.data[[0, y as usize, x as usize]]);
            }
            buf.save(path)?;
        } else {
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for (x, y, p) in buf.enumerate_pixels_mut() {
                for ch in 0..3 {
                    p.0[ch] = quant(self.data[[ch, y as usize, x as usize]]);
                }
            }
            buf.save(path)?;
        }
        Ok(())
    }
}

/// A single-channel filter response in `(1, h, w)` layout. Unlike
/// [`ImageTensor`] the values are signed and unbounded, only finiteness is
/// required.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceMap {
    data: Array3<f64>,
}

impl LaplaceMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, _, _) = data.dim();
        if c != 1 {
            return Err(LmqError::invalid(format!(
                "filter map must be single channel, got {c}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LmqError::invalid("filter map contains non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Rescales to `[0,1]` for visualization (constant maps go to 0.5).
    pub fn to_image(&self) -> Result<ImageTensor> {
        let min = self.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        let norm = if span > 0.0 {
            self.data.mapv(|v| (v - min) / span)
        } else {
            Array3::from_elem(self.data.dim(), 0.5)
        };
        ImageTensor::new(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn rejects_bad_channel_counts() {
        let bad = Array3::zeros((2, 16, 16));
        assert!(ImageTensor::new(bad).is_err());
    }

    #[test]
    fn rejects_out_of_range_values() {
        let mut data = Array3::zeros((1, 16, 16));
        data[[0, 3, 3]] = 1.5;
        assert!(ImageTensor::new(data).is_err());
        let mut data = Array3::zeros((1, 16, 16));
        data[[0, 0, 0]] = f64::NAN;
        assert!(ImageTensor::new(data).is_err());
    }

    #[test]
    fn rejects_tiny_images() {
        let data = Array3::zeros((1, 4, 4));
        assert!(ImageTensor::new(data).is_err());
    }

    #[test]
    fn png_round_trip_stays_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        let data = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
            ((c + 1) as f64 * 0.11 + y as f64 * 0.013 + x as f64 * 0.029) % 1.0
        });
        let img = ImageTensor::new(data.clone()).unwrap();
        img.save(&path).unwrap();
        let back = ImageTensor::load(&path).unwrap();
        let max_err = data
            .iter()
            .zip(back.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            ;
        assert!(
            max_err <= 1.0 / 255.0,
            "round trip error {max_err} exceeds one 8-bit step"
        );
    }

    #[test]
    fn laplace_map_requires_single_channel_finite() {
        assert!(LaplaceMap::new(Array3::zeros((3, 8, 8))).is_err());
        let mut m = Array3::zeros((1, 8, 8));
        m[[0, 1, 1]] = f64::INFINITY;
        assert!(LaplaceMap::new(m).is_err());
        let mut m = Array3::zeros((1, 8, 8));
        m[[0, 1, 1]] = -7.25;
        assert!(LaplaceMap::new(m).is_ok());
    }
}
