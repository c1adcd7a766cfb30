//! Dense row-major 2D arrays and the interpolation helpers used throughout.
//!
//! Row 0 is the top of the image; fractional pixel coordinates address pixel
//! centers, so (0.0, 0.0) is the center of the top-left pixel. Lookups outside
//! the grid read as zero.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid2 {
    pub fn zeros(height: usize, width: usize) -> Self {
        Grid2 { height, width, data: vec![0.0; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "grid {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(Grid2 { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    /// Bilinear interpolation at fractional pixel coordinates, zero outside.
    pub fn bilinear(&self, row: f64, col: f64) -> f64 {
        let r0 = row.floor();
        let c0 = col.floor();
        let fr = row - r0;
        let fc = col - c0;
        let r0 = r0 as i64;
        let c0 = c0 as i64;
        let mut acc = 0.0;
        for (dr, wr) in [(0i64, 1.0 - fr), (1, fr)] {
            for (dc, wc) in [(0i64, 1.0 - fc), (1, fc)] {
                let r = r0 + dr;
                let c = c0 + dc;
                if r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width {
                    acc += wr * wc * self.at(r as usize, c as usize);
                }
            }
        }
        acc
    }

    /// Nearest-neighbor lookup at fractional pixel coordinates, zero outside.
    pub fn nearest(&self, row: f64, col: f64) -> f64 {
        let r = row.round() as i64;
        let c = col.round() as i64;
        if r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width {
            self.at(r as usize, c as usize)
        } else {
            0.0
        }
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Boolean per-pixel metal mask, same layout conventions as [`Grid2`].
#[derive(Debug, Clone, PartialEq)]
pub struct MetalMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl MetalMask {
    pub fn empty(height: usize, width: usize) -> Self {
        MetalMask { height, width, data: vec![false; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(MetalMask { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    /// Nearest-neighbor lookup at fractional pixel coordinates, false outside.
    pub fn nearest(&self, row: f64, col: f64) -> bool {
        let r = row.round() as i64;
        let c = col.round() as i64;
        if r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width {
            self.at(r as usize, c as usize)
        } else {
            false
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    /// Complement mask, marking exactly the pixels this one does not.
    pub fn invert(&self) -> MetalMask {
        MetalMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&m| !m).collect(),
        }
    }

    /// 0/1 image view of the mask, for projection and file output.
    pub fn to_grid(&self) -> Grid2 {
        let data = self.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Grid2 { height: self.height, width: self.width, data }
    }

    /// Morphological dilation by `radius` in the Chebyshev metric
    /// (8-neighborhood square structuring element applied `radius` times).
    pub fn dilate(&self, radius: usize) -> MetalMask {
        let r = radius as i64;
        let mut out = MetalMask::empty(self.height, self.width);
        for row in 0..self.height as i64 {
            for col in 0..self.width as i64 {
                'search: for dr in -r..=r {
                    for dc in -r..=r {
                        let (sr, sc) = (row + dr, col + dc);
                        if sr >= 0
                            && sc >= 0
                            && (sr as usize) < self.height
                            && (sc as usize) < self.width
                            && self.at(sr as usize, sc as usize)
                        {
                            out.set(row as usize, col as usize, true);
                            break 'search;
                        }
                    }
                }
            }
        }
        out
    }
}
