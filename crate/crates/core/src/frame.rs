//! Normalized intensity frames.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("frame {index}: expected {expected} intensities for {width}x{height}, got {actual}")]
    SizeMismatch {
        index: usize,
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("frame {index}: intensity {value} at offset {offset} outside [0, 1]")]
    OutOfRange {
        index: usize,
        offset: usize,
        value: f64,
    },
    #[error("frame {index}: empty image")]
    Empty { index: usize },
}

/// A grayscale frame with intensities normalized to `[0, 1]`, stored row-major.
///
/// Pixel `(x, y)` has its center at integer coordinates; bilinear sampling is
/// defined on `[0, width - 1] x [0, height - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    index: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(index: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self, FrameError> {
        if width == 0 || height == 0 {
            return Err(FrameError::Empty { index });
        }
        if data.len() != width * height {
            return Err(FrameError::SizeMismatch {
                index,
                width,
                height,
                expected: width * height,
                actual: data.len(),
            });
        }
        if let Some((offset, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(FrameError::OutOfRange { index, offset, value });
        }
        Ok(Self {
            index,
            width,
            height,
            data,
        })
    }

    /// Builds a frame from 8-bit samples, mapping `q` to `q / 255`.
    pub fn from_u8(index: usize, width: usize, height: usize, bytes: &[u8]) -> Result<Self, FrameError> {
        let data = bytes.iter().map(|&q| f64::from(q) / 255.0).collect();
        Self::new(index, width, height, data)
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn with_index(mut self, index: usize) -> Self {
        self.index = index;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// True if `(x, y)` lies inside the bilinear sampling domain.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }

    /// Bilinear sample; `None` outside the image.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        if !self.contains(x, y) {
            return None;
        }
        Some(bilinear(&self.data, self.width, self.height, x, y))
    }

    /// Quantizes to 8 bits with `round(255 v)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }
}

#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Bilinear interpolation on a row-major grid. Coordinates are clamped to the grid.
pub(crate) fn bilinear(data: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let x0 = (x.floor() as usize).min(width - 1);
    let y0 = (y.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let v00 = data[y0 * width + x0];
    let v10 = data[y0 * width + x1];
    let v01 = data[y1 * width + x0];
    let v11 = data[y1 * width + x1];
    if fx == 0.0 && fy == 0.0 {
        return v00;
    }
    let top = v00 + (v10 - v00) * fx;
    let bottom = v01 + (v11 - v01) * fx;
    top + (bottom - top) * fy
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_frames() {
        assert!(matches!(
            Frame::new(0, 2, 2, vec![0.0; 3]),
            Err(FrameError::SizeMismatch { .. })
        ));
        assert!(matches!(
            Frame::new(0, 2, 1, vec![0.0, 1.5]),
            Err(FrameError::OutOfRange { offset: 1, .. })
        ));
        assert!(matches!(Frame::new(3, 0, 1, vec![]), Err(FrameError::Empty { index: 3 })));
    }

    #[test]
    fn bilinear_sampling() {
        let f = Frame::new(0, 2, 2, vec![0.0, 1.0, 0.5, 0.5]).unwrap();
        assert_eq!(f.sample(0.0, 0.0), Some(0.0));
        assert_eq!(f.sample(1.0, 0.0), Some(1.0));
        assert!((f.sample(0.5, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((f.sample(0.5, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(f.sample(-0.1, 0.0), None);
        assert_eq!(f.sample(1.0, 1.01), None);
    }

    #[test]
    fn u8_round_trip() {
        let bytes: Vec<u8> = (0..=255).collect();
        let f = Frame::from_u8(0, 16, 16, &bytes).unwrap();
        assert_eq!(f.to_u8(), bytes);
    }
}
