//! RGB images and the BT.601 full-range YCbCr transform.
//!
//! Chroma is kept as a signed offset (`Cb − 128`, `Cr − 128` for `d = 255`),
//! so a gray image has exactly zero chroma and reconstructs to exact gray.

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct RgbGrid {
    pub channels: [ImageGrid; 3],
}

impl RgbGrid {
    pub fn new(r: ImageGrid, g: ImageGrid, b: ImageGrid) -> Result<Self> {
        if !r.same_shape(&g) || !r.same_shape(&b) {
            return Err(Error::InvalidInput("color channels differ in size".into()));
        }
        Ok(Self { channels: [r, g, b] })
    }

    pub fn from_gray(g: &ImageGrid) -> Self {
        Self {
            channels: [g.clone(), g.clone(), g.clone()],
        }
    }

    pub fn height(&self) -> usize {
        self.channels[0].height()
    }

    pub fn width(&self) -> usize {
        self.channels[0].width()
    }

    pub fn clamped(&self, lo: f64, hi: f64) -> Self {
        Self {
            channels: self.channels.clone().map(|c| c.clamped(lo, hi)),
        }
    }
}

const KR: f64 = 0.299;
const KB: f64 = 0.114;
const KG: f64 = 1.0 - KR - KB;

/// `(Y, Cb − 128, Cr − 128)` in the same intensity scale as the input.
pub fn rgb_to_ycbcr(img: &RgbGrid) -> [ImageGrid; 3] {
    let [r, g, b] = &img.channels;
    let (h, w) = (img.height(), img.width());
    let px = |i: usize| (r.as_slice()[i], g.as_slice()[i], b.as_slice()[i]);
    let mut y = Vec::with_capacity(h * w);
    let mut cb = Vec::with_capacity(h * w);
    let mut cr = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let (rv, gv, bv) = px(i);
        let luma = KR * rv + KG * gv + KB * bv;
        y.push(luma);
        cb.push((bv - luma) / (2.0 * (1.0 - KB)));
        cr.push((rv - luma) / (2.0 * (1.0 - KR)));
    }
    let mk = |v| ImageGrid::new(h, w, v).expect("matching length");
    [mk(y), mk(cb), mk(cr)]
}

/// Exact inverse of [`rgb_to_ycbcr`].
pub fn ycbcr_to_rgb(ycc: &[ImageGrid; 3]) -> Result<RgbGrid> {
    let [y, cb, cr] = ycc;
    if !y.same_shape(cb) || !y.same_shape(cr) {
        return Err(Error::InvalidInput("YCbCr planes differ in size".into()));
    }
    let n = y.len();
    let (mut r, mut g, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (yv, cbv, crv) = (y.as_slice()[i], cb.as_slice()[i], cr.as_slice()[i]);
        let rv = yv + 2.0 * (1.0 - KR) * crv;
        let bv = yv + 2.0 * (1.0 - KB) * cbv;
        let gv = (yv - KR * rv - KB * bv) / KG;
        r.push(rv);
        g.push(gv);
        b.push(bv);
    }
    let (h, w) = (y.height(), y.width());
    RgbGrid::new(ImageGrid::new(h, w, r)?, ImageGrid::new(h, w, g)?, ImageGrid::new(h, w, b)?)
}
