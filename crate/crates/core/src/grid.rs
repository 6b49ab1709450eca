//! Dense 2D grids: RGB images in `[0,1]` and per-pixel class-index maps.

use crate::error::{Error, Result};

/// Number of color channels an [`ImageGrid`] always carries.
pub const CHANNELS: usize = 3;

/// The class index that marks pixels excluded from losses, metrics, and
/// co-occurrence counting.
pub const IGNORE_INDEX: u8 = 255;

/// An RGB image stored row-major with interleaved channels
/// (`idx = (y * w + x) * 3 + c`). Values live in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    /// All-zero (black) image.
    pub fn zeros(height: usize, width: usize) -> Self {
        ImageGrid {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::InvalidConfig(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                CHANNELS
            )));
        }
        Ok(ImageGrid {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// True when every value sits inside `[0, 1]`.
    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn same_dims(&self, other: &ImageGrid) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// A per-pixel class-index map. Values are class indices in
/// `0..n_classes` or [`IGNORE_INDEX`]; validation against a concrete class
/// count happens at load time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    /// Map filled with a constant value.
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidConfig(format!(
                "label data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Check every value against the class range, returning the first
    /// offender. `id` only decorates the error message.
    pub fn validate(&self, n_classes: usize, ignore_index: u8, id: &str) -> Result<()> {
        for &v in &self.data {
            if v != ignore_index && usize::from(v) >= n_classes {
                return Err(Error::LabelOutOfRange {
                    id: id.to_string(),
                    value: v,
                    n_classes,
                });
            }
        }
        Ok(())
    }

    pub fn same_dims(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Pixel count per value, indexed by the value byte.
    pub fn histogram(&self) -> [u64; 256] {
        let mut hist = [0u64; 256];
        for &v in &self.data {
            hist[usize::from(v)] += 1;
        }
        hist
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_indexing_round_trips() {
        let mut img = ImageGrid::zeros(2, 3);
        img.set(1, 2, 0, 0.25);
        assert_eq!(img.get(1, 2, 0), 0.25);
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert!(img.in_unit_range());
    }

    #[test]
    fn label_validation_catches_out_of_range() {
        let label = LabelMap::from_data(1, 3, vec![0, 200, 255]).unwrap();
        assert!(label.validate(21, 255, "t").is_err());
        assert!(label.validate(201, 255, "t").is_ok());
    }

    #[test]
    fn histogram_counts_every_pixel() {
        let label = LabelMap::from_data(2, 2, vec![0, 3, 3, 255]).unwrap();
        let h = label.histogram();
        assert_eq!(h[0], 1);
        assert_eq!(h[3], 2);
        assert_eq!(h[255], 1);
        assert_eq!(h.iter().sum::<u64>(), 4);
    }
}
