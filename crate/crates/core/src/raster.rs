//! Plain row-major image buffers.

use crate::error::{Error, Result};

/// 16-bit grayscale frame, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Gray16 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

impl Gray16 {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 || width.checked_mul(height) != Some(data.len()) {
            return Err(Error::Data(format!(
                "{width}x{height} image cannot hold {} pixels",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u16) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    /// Sum of pixels whose centers fall inside the box.
    pub fn sum_in(&self, b: &crate::geometry::BoundingBox) -> u64 {
        let mut s = 0u64;
        for y in 0..self.height {
            let cy = y as f64 + 0.5;
            if cy < b.y_min || cy > b.y_max {
                continue;
            }
            for x in 0..self.width {
                let cx = x as f64 + 0.5;
                if cx >= b.x_min && cx <= b.x_max {
                    s += self.get(x, y) as u64;
                }
            }
        }
        s
    }
}

/// Floating-point accumulation buffer used while rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Round to the nearest count and saturate into `u16`.
    pub fn quantize(&self) -> Gray16 {
        let data = self
            .data
            .iter()
            .map(|&v| v.round().clamp(0.0, u16::MAX as f64) as u16)
            .collect();
        Gray16 {
            width: self.width,
            height: self.height,
            data,
        }
    }
}
