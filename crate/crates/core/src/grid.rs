//! Grid geometry, images and displacement bookkeeping.
//!
//! Images are stored column-major: pixel `(y, x)` lives at `x * height + y`.
//! This matches the vectorization used by every operator in [`crate::ops`],
//! where the HR grid is `(r·m) × (r·n)` and the LR grid is `m × n`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Shapes shared by every operator: LR size `m × n`, factor `r`, `p` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub p: usize,
}

impl GridGeometry {
    pub fn new(m: usize, n: usize, r: usize, p: usize) -> Result<Self> {
        if m == 0 || n == 0 || r == 0 || p == 0 {
            return Err(Error::InvalidInput(format!(
                "grid geometry needs positive sizes, got m={m} n={n} r={r} p={p}"
            )));
        }
        Ok(Self { m, n, r, p })
    }

    pub fn hr_height(&self) -> usize {
        self.r * self.m
    }

    pub fn hr_width(&self) -> usize {
        self.r * self.n
    }

    pub fn hr_len(&self) -> usize {
        self.r * self.r * self.m * self.n
    }

    pub fn lr_len(&self) -> usize {
        self.m * self.n
    }
}

/// A real-valued single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_len(height * width, data.len())?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Builds an image from `f(y, x)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for x in 0..width {
            for y in 0..height {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize) -> usize {
        x * self.height + y
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[x * self.height + y]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: f64) {
        let i = self.index(y, x);
        self.data[i] = value;
    }

    /// Pixel lookup with coordinates clamped to the border.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x)
    }

    /// Pixel lookup with periodic wrap-around.
    #[inline]
    pub fn get_periodic(&self, y: isize, x: isize) -> f64 {
        let y = y.rem_euclid(self.height as isize) as usize;
        let x = x.rem_euclid(self.width as isize) as usize;
        self.get(y, x)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, alpha: f64) -> ImageGrid {
        self.map(|v| v * alpha)
    }

    pub fn clamped(&self, lo: f64, hi: f64) -> ImageGrid {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Bilinear sample at real coordinates, or `None` outside `[0, h-1] × [0, w-1]`.
    pub fn sample_bilinear(&self, y: f64, x: f64) -> Option<f64> {
        let (h, w) = (self.height as f64, self.width as f64);
        if !(y >= 0.0 && x >= 0.0 && y <= h - 1.0 && x <= w - 1.0) {
            return None;
        }
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let ty = y - y0 as f64;
        let tx = x - x0 as f64;
        let top = (1.0 - tx) * self.get(y0, x0) + tx * self.get(y0, x1);
        let bottom = (1.0 - tx) * self.get(y1, x0) + tx * self.get(y1, x1);
        Some((1.0 - ty) * top + ty * bottom)
    }

    /// Bilinear sample with coordinates clamped into the image.
    pub fn sample_bilinear_clamped(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        self.sample_bilinear(y, x).unwrap_or(0.0)
    }

    /// Bilinear sample on the torus.
    pub fn sample_bilinear_periodic(&self, y: f64, x: f64) -> f64 {
        let y0 = y.floor();
        let x0 = x.floor();
        let ty = y - y0;
        let tx = x - x0;
        let (y0, x0) = (y0 as isize, x0 as isize);
        let a = self.get_periodic(y0, x0);
        let b = self.get_periodic(y0, x0 + 1);
        let c = self.get_periodic(y0 + 1, x0);
        let d = self.get_periodic(y0 + 1, x0 + 1);
        (1.0 - ty) * ((1.0 - tx) * a + tx * b) + ty * ((1.0 - tx) * c + tx * d)
    }

    /// Bilinear upsampling by `r`, where HR pixel `j` sits at LR coordinate `j / r`.
    ///
    /// Uses the same pixel registration as the downsampler in [`crate::ops`],
    /// so it is the natural single-frame baseline.
    pub fn upsample_bilinear(&self, r: usize) -> ImageGrid {
        let rf = r as f64;
        ImageGrid::from_fn(self.height * r, self.width * r, |y, x| {
            self.sample_bilinear_clamped(y as f64 / rf, x as f64 / rf)
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Split of a shift `r·s` (in HR pixels) into integer and fractional parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    pub s_x: f64,
    pub s_y: f64,
    pub l_x: i64,
    pub l_y: i64,
    pub eps_x: f64,
    pub eps_y: f64,
}

impl Displacement {
    pub fn new(s_x: f64, s_y: f64, r: usize) -> Result<Self> {
        let (l_x, eps_x) = decompose_displacement(s_x, r)?;
        let (l_y, eps_y) = decompose_displacement(s_y, r)?;
        Ok(Self {
            s_x,
            s_y,
            l_x,
            l_y,
            eps_x,
            eps_y,
        })
    }

    pub fn zero() -> Self {
        Self {
            s_x: 0.0,
            s_y: 0.0,
            l_x: 0,
            l_y: 0,
            eps_x: 0.0,
            eps_y: 0.0,
        }
    }
}

/// Decomposes `r·s = l + eps` with `l = floor(r·s)` and `0 <= eps < 1`.
pub fn decompose_displacement(s: f64, r: usize) -> Result<(i64, f64)> {
    if !s.is_finite() {
        return Err(Error::InvalidInput(format!("displacement {s} is not finite")));
    }
    if r == 0 {
        return Err(Error::InvalidInput("upsampling factor must be >= 1".into()));
    }
    let scaled = r as f64 * s;
    let l = scaled.floor();
    let mut eps = scaled - l;
    let mut l = l as i64;
    // floor(-tiny) = -1 leaves eps = 1 - tiny, which rounds up to 1.0
    if eps >= 1.0 {
        eps = 0.0;
        l += 1;
    }
    Ok((l, eps))
}
