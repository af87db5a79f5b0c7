//! PSNR and global SSIM restricted to the region every frame covers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Inclusive pixel bounds `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl OverlapRegion {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 > x1 || y0 > y1 {
            return Err(Error::InvalidInput(format!(
                "empty overlap region x {x0}..={x1}, y {y0}..={y1}"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width.saturating_sub(1),
            y1: height.saturating_sub(1),
        }
    }

    /// Intersection of all frames on the HR grid, from per-frame integer HR shifts.
    ///
    /// Mirrors the window masks: rows/columns `[l_+, size − l_−)` survive.
    pub fn from_integer_shifts(
        hr_height: usize,
        hr_width: usize,
        shifts: impl IntoIterator<Item = (i64, i64)>,
    ) -> Result<Self> {
        let (mut px, mut mx, mut py, mut my) = (0i64, 0i64, 0i64, 0i64);
        for (lx, ly) in shifts {
            px = px.max(lx);
            mx = mx.max(-lx);
            py = py.max(ly);
            my = my.max(-ly);
        }
        let x1 = hr_width as i64 - mx - 1;
        let y1 = hr_height as i64 - my - 1;
        if x1 < px || y1 < py {
            return Err(Error::InvalidInput("frames have no common overlap".into()));
        }
        Self::new(px as usize, py as usize, x1 as usize, y1 as usize)
    }

    pub fn pixel_count(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }

    pub fn fits(&self, img: &ImageGrid) -> bool {
        self.x1 < img.width() && self.y1 < img.height()
    }

    fn pixels<'a>(&self, img: &'a ImageGrid) -> impl Iterator<Item = f64> + 'a {
        let r = *self;
        (r.x0..=r.x1).flat_map(move |x| (r.y0..=r.y1).map(move |y| img.get(y, x)))
    }
}

fn check_pair(x: &ImageGrid, y: &ImageGrid, d: f64, region: &OverlapRegion) -> Result<()> {
    if !x.same_shape(y) {
        return Err(Error::InvalidInput(format!(
            "image sizes differ: {}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    if !(d > 0.0) {
        return Err(Error::InvalidInput(format!("dynamic range {d} must be > 0")));
    }
    if !region.fits(x) {
        return Err(Error::InvalidInput(format!(
            "region {region:?} exceeds {}x{} image",
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

/// `10 log10(d² / MSE)` over the region; `+inf` when the images agree exactly.
pub fn psnr(x: &ImageGrid, y: &ImageGrid, d: f64, region: &OverlapRegion) -> Result<f64> {
    check_pair(x, y, d, region)?;
    let sse: f64 = region
        .pixels(x)
        .zip(region.pixels(y))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / region.pixel_count() as f64;
    Ok(10.0 * (d * d / mse).log10())
}

/// Single-window SSIM over the region with population statistics.
pub fn ssim(x: &ImageGrid, y: &ImageGrid, d: f64, region: &OverlapRegion) -> Result<f64> {
    check_pair(x, y, d, region)?;
    let n = region.pixel_count() as f64;
    let mx = region.pixels(x).sum::<f64>() / n;
    let my = region.pixels(y).sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in region.pixels(x).zip(region.pixels(y)) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cov += (a - mx) * (b - my);
    }
    vx /= n;
    vy /= n;
    cov /= n;
    let c1 = (0.01 * d).powi(2);
    let c2 = (0.03 * d).powi(2);
    if x == y {
        return Ok(1.0);
    }
    Ok(((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub region: OverlapRegion,
}

pub fn evaluate(x: &ImageGrid, y: &ImageGrid, d: f64, region: OverlapRegion) -> Result<QualityReport> {
    Ok(QualityReport {
        psnr_db: psnr(x, y, d, &region)?,
        ssim: ssim(x, y, d, &region)?,
        region,
    })
}
