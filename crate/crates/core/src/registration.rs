//! Motion estimation against the reference frame.
//!
//! Dense Local All-Pass (LAP) flow, integer-flow resampling and a
//! Levenberg–Marquardt fit of the remaining global translation.
//!
//! Sign convention: a frame `g` whose content is moved by `+d` relative to the
//! reference, `g(x) = g_0(x − d)`, has LAP flow `M ≈ d`, so `g(x + M) ≈ g_0(x)`.
//! A translation estimate `s` means `g̃(x) ≈ g_0(x + s)`.

use nalgebra::{Matrix2, Matrix5, SymmetricEigen, Vector2, Vector5};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::ops::Fft2;

/// Number of basis filters, `φ_0` included.
pub const LAP_FILTERS: usize = 6;
const MAX_CONDITION: f64 = 1e12;

/// One separable term `coef · hx(k) · hy(l)`.
#[derive(Debug, Clone)]
struct SeparableTerm {
    coef: f64,
    hx: Vec<f64>,
    hy: Vec<f64>,
}

/// Gaussian-derived LAP basis `φ_0 … φ_5` on `[−R, R]²`.
#[derive(Debug, Clone)]
pub struct LapFilterBank {
    radius: usize,
    sigma: f64,
    terms: Vec<Vec<SeparableTerm>>,
}

impl LapFilterBank {
    pub fn new(radius: usize) -> Result<Self> {
        if radius == 0 {
            return Err(Error::InvalidInput("LAP radius must be >= 1".into()));
        }
        let sigma = (radius as f64 + 2.0) / 4.0;
        let r = radius as i64;
        let gauss: Vec<f64> = (-r..=r)
            .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let moment = |p: i32| -> Vec<f64> {
            (-r..=r)
                .zip(&gauss)
                .map(|(t, g)| (t as f64).powi(p) * g)
                .collect()
        };
        let (g0, g1, g2) = (gauss.clone(), moment(1), moment(2));
        let term = |coef: f64, hx: &Vec<f64>, hy: &Vec<f64>| SeparableTerm {
            coef,
            hx: hx.clone(),
            hy: hy.clone(),
        };
        let s2 = 2.0 * sigma * sigma;
        let terms = vec![
            vec![term(1.0, &g0, &g0)],
            vec![term(1.0, &g1, &g0)],
            vec![term(1.0, &g0, &g1)],
            vec![term(1.0, &g2, &g0), term(1.0, &g0, &g2), term(-s2, &g0, &g0)],
            vec![term(1.0, &g1, &g1)],
            vec![term(1.0, &g2, &g0), term(-1.0, &g0, &g2)],
        ];
        Ok(Self {
            radius,
            sigma,
            terms,
        })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Tap `φ_j(k, l)`, with `k` along x and `l` along y.
    pub fn tap(&self, j: usize, k: i64, l: i64) -> f64 {
        let r = self.radius as i64;
        if k.abs() > r || l.abs() > r {
            return 0.0;
        }
        let (ik, il) = ((k + r) as usize, (l + r) as usize);
        self.terms[j]
            .iter()
            .map(|t| t.coef * t.hx[ik] * t.hy[il])
            .sum()
    }

    /// `φ_j(−k, −l) = parity · φ_j(k, l)`.
    fn parity(j: usize) -> f64 {
        if j == 1 || j == 2 {
            -1.0
        } else {
            1.0
        }
    }

    /// Convolution `φ_j * g` with clamp-to-edge boundaries.
    fn convolve(&self, j: usize, g: &ImageGrid) -> ImageGrid {
        let mut out = ImageGrid::zeros(g.height(), g.width());
        for t in &self.terms[j] {
            let tmp = convolve_x(g, &t.hx, self.radius);
            let sep = convolve_y(&tmp, &t.hy, self.radius);
            for (o, v) in out.as_mut_slice().iter_mut().zip(sep.as_slice()) {
                *o += t.coef * v;
            }
        }
        out
    }
}

impl Default for LapFilterBank {
    fn default() -> Self {
        Self::new(16).expect("radius 16 is valid")
    }
}

fn convolve_x(g: &ImageGrid, h: &[f64], radius: usize) -> ImageGrid {
    let r = radius as isize;
    ImageGrid::from_fn(g.height(), g.width(), |y, x| {
        (-r..=r)
            .map(|k| h[(k + r) as usize] * g.get_clamped(y as isize, x as isize - k))
            .sum()
    })
}

fn convolve_y(g: &ImageGrid, h: &[f64], radius: usize) -> ImageGrid {
    let r = radius as isize;
    ImageGrid::from_fn(g.height(), g.width(), |y, x| {
        (-r..=r)
            .map(|l| h[(l + r) as usize] * g.get_clamped(y as isize - l, x as isize))
            .sum()
    })
}

/// Separable Gaussian blur with clamp-to-edge extension; `sigma <= 0` returns a copy.
///
/// Registering blurred frames suppresses the noise-induced bias of bilinear
/// resampling while leaving translations unchanged.
pub fn gaussian_prefilter(g: &ImageGrid, sigma: f64) -> ImageGrid {
    if !(sigma > 0.0) {
        return g.clone();
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let mut h: Vec<f64> = (0..=2 * radius)
        .map(|k| {
            let t = k as f64 - radius as f64;
            (-t * t / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= total);
    convolve_y(&convolve_x(g, &h, radius), &h, radius)
}

/// Dense flow `(u, v)` in LR pixels with a per-pixel validity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: ImageGrid,
    pub v: ImageGrid,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            u: ImageGrid::zeros(height, width),
            v: ImageGrid::zeros(height, width),
            valid: vec![true; height * width],
        }
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> Self {
        Self {
            u: ImageGrid::filled(height, width, u),
            v: ImageGrid::filled(height, width, v),
            valid: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.u.height()
    }

    pub fn width(&self) -> usize {
        self.u.width()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    /// Median of the truncated flow over valid pixels, `(0, 0)` if none.
    pub fn median_integer_flow(&self) -> (i64, i64) {
        let collect = |img: &ImageGrid| {
            let mut vals: Vec<i64> = img
                .as_slice()
                .iter()
                .zip(&self.valid)
                .filter(|(_, &ok)| ok)
                .map(|(v, _)| v.trunc() as i64)
                .collect();
            vals.sort_unstable();
            vals
        };
        let (us, vs) = (collect(&self.u), collect(&self.v));
        if us.is_empty() {
            return (0, 0);
        }
        (us[us.len() / 2], vs[vs.len() / 2])
    }

    pub fn summary(&self) -> FlowSummary {
        let mean = |img: &ImageGrid| {
            let (mut s, mut c) = (0.0, 0usize);
            for (v, &ok) in img.as_slice().iter().zip(&self.valid) {
                if ok {
                    s += v;
                    c += 1;
                }
            }
            if c == 0 {
                0.0
            } else {
                s / c as f64
            }
        };
        let (iu, iv) = self.median_integer_flow();
        FlowSummary {
            mean_u: mean(&self.u),
            mean_v: mean(&self.v),
            integer_u: iu,
            integer_v: iv,
            valid_fraction: self.valid_count() as f64 / self.valid.len().max(1) as f64,
        }
    }

    /// `u` and `v` as whitespace-separated matrices, one image row per line.
    pub fn to_text(&self) -> (String, String) {
        (matrix_text(&self.u), matrix_text(&self.v))
    }
}

fn matrix_text(img: &ImageGrid) -> String {
    let mut s = String::new();
    for y in 0..img.height() {
        let row: Vec<String> = (0..img.width()).map(|x| format!("{:e}", img.get(y, x))).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowSummary {
    pub mean_u: f64,
    pub mean_v: f64,
    pub integer_u: i64,
    pub integer_v: i64,
    pub valid_fraction: f64,
}

/// Column-major summed-area table with a zero border row and column.
struct IntegralImage {
    h1: usize,
    data: Vec<f64>,
}

impl IntegralImage {
    fn new(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Self {
        let h1 = h + 1;
        let mut data = vec![0.0; h1 * (w + 1)];
        for x in 0..w {
            let mut col = 0.0;
            for y in 0..h {
                col += f(x * h + y);
                data[(x + 1) * h1 + y + 1] = data[x * h1 + y + 1] + col;
            }
        }
        Self { h1, data }
    }

    /// Sum over `y0..y1` × `x0..x1` (exclusive ends).
    fn rect(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> f64 {
        let at = |y: usize, x: usize| self.data[x * self.h1 + y];
        at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0)
    }
}

/// Dense LAP flow of `g_i` against the reference `g_0`.
///
/// Window sums skip filter responses within `R` of the border, where the
/// clamp-to-edge extension would corrupt them. Pixels within `R` of the border
/// copy the flow of the nearest interior pixel.
pub fn lap_flow(g_i: &ImageGrid, g_0: &ImageGrid, bank: &LapFilterBank) -> Result<FlowField> {
    if !g_i.same_shape(g_0) {
        return Err(Error::InvalidInput(format!(
            "flow inputs differ in size: {}x{} vs {}x{}",
            g_i.height(),
            g_i.width(),
            g_0.height(),
            g_0.width()
        )));
    }
    let (h, w) = (g_0.height(), g_0.width());
    let r = bank.radius();
    let side = 2 * r + 1;
    if h < side || w < side {
        return Err(Error::InvalidInput(format!(
            "flow needs images of at least {side}x{side}, got {h}x{w}"
        )));
    }

    // residual images J_j = φ_j * g_0 − φ_j(−·) * g_i
    let jac: Vec<ImageGrid> = (0..LAP_FILTERS)
        .into_par_iter()
        .map(|j| {
            let a = bank.convolve(j, g_0);
            let b = bank.convolve(j, g_i);
            let s = LapFilterBank::parity(j);
            let data = a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| p - s * q).collect();
            ImageGrid::new(h, w, data).expect("same shape")
        })
        .collect();

    let pairs: Vec<(usize, usize)> = (0..LAP_FILTERS)
        .flat_map(|a| (a.max(1)..LAP_FILTERS).map(move |b| (a, b)))
        .collect();
    let tables: Vec<IntegralImage> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let (ja, jb) = (jac[a].as_slice(), jac[b].as_slice());
            IntegralImage::new(h, w, |i| ja[i] * jb[i])
        })
        .collect();
    let table = |a: usize, b: usize| -> &IntegralImage {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let idx = pairs.iter().position(|&p| p == (a, b)).expect("pair table");
        &tables[idx]
    };

    let mut mx = [0.0; LAP_FILTERS];
    let mut my = [0.0; LAP_FILTERS];
    let mut m0 = [0.0; LAP_FILTERS];
    let ri = r as i64;
    for (j, ((sx, sy), s0)) in mx.iter_mut().zip(my.iter_mut()).zip(m0.iter_mut()).enumerate() {
        for k in -ri..=ri {
            for l in -ri..=ri {
                let t = bank.tap(j, k, l);
                *sx += k as f64 * t;
                *sy += l as f64 * t;
                *s0 += t;
            }
        }
    }

    let (ny, nx) = (h - 2 * r, w - 2 * r);
    let interior: Vec<(f64, f64, bool)> = (0..nx)
        .into_par_iter()
        .flat_map_iter(|cx| {
            let x = cx + r;
            let table = &table;
            (0..ny).map(move |cy| {
                let y = cy + r;
                let (y0, y1) = ((y - r).max(r), (y + r + 1).min(h - r));
                let (x0, x1) = ((x - r).max(r), (x + r + 1).min(w - r));
                let sum = |a: usize, b: usize| table(a, b).rect(y0, y1, x0, x1);
                let mut a = Matrix5::zeros();
                let mut rhs = Vector5::zeros();
                for p in 0..5 {
                    rhs[p] = -sum(0, p + 1);
                    for q in p..5 {
                        let v = sum(p + 1, q + 1);
                        a[(p, q)] = v;
                        a[(q, p)] = v;
                    }
                }
                match solve_window(&a, &rhs) {
                    Some(c) => {
                        let num_x = mx[0] + (0..5).map(|j| c[j] * mx[j + 1]).sum::<f64>();
                        let num_y = my[0] + (0..5).map(|j| c[j] * my[j + 1]).sum::<f64>();
                        let den = m0[0] + (0..5).map(|j| c[j] * m0[j + 1]).sum::<f64>();
                        let (u, v) = (2.0 * num_x / den, 2.0 * num_y / den);
                        if u.is_finite() && v.is_finite() {
                            (u, v, true)
                        } else {
                            (0.0, 0.0, false)
                        }
                    }
                    None => (0.0, 0.0, false),
                }
            })
        })
        .collect();

    let mut flow = FlowField::zeros(h, w);
    for x in 0..w {
        let cx = x.clamp(r, w - 1 - r) - r;
        for y in 0..h {
            let cy = y.clamp(r, h - 1 - r) - r;
            let (u, v, ok) = interior[cx * ny + cy];
            let i = flow.u.index(y, x);
            flow.u.as_mut_slice()[i] = u;
            flow.v.as_mut_slice()[i] = v;
            flow.valid[i] = ok;
        }
    }
    Ok(flow)
}

/// Solves the 5×5 window system, or `None` if it is too ill-conditioned.
///
/// The condition number is measured after symmetric diagonal scaling so that
/// the very different magnitudes of the basis responses do not count against it.
fn solve_window(a: &Matrix5<f64>, rhs: &Vector5<f64>) -> Option<Vector5<f64>> {
    let d: Vector5<f64> = a.diagonal();
    if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return None;
    }
    let s = d.map(|v| 1.0 / v.sqrt());
    let scaled = Matrix5::from_fn(|i, j| a[(i, j)] * s[i] * s[j]);
    let eig = SymmetricEigen::new(scaled);
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return None;
    }
    let b = rhs.component_mul(&s);
    let y = scaled.cholesky()?.solve(&b);
    Some(y.component_mul(&s))
}

/// `g̃(x, y) = g_i` at `(x, y)` displaced by the truncated flow, clamped to the border.
pub fn resample_integer_flow(g_i: &ImageGrid, flow: &FlowField) -> Result<ImageGrid> {
    if g_i.height() != flow.height() || g_i.width() != flow.width() {
        return Err(Error::InvalidInput(format!(
            "flow is {}x{} but frame is {}x{}",
            flow.height(),
            flow.width(),
            g_i.height(),
            g_i.width()
        )));
    }
    Ok(ImageGrid::from_fn(g_i.height(), g_i.width(), |y, x| {
        let dx = flow.u.get(y, x).trunc() as isize;
        let dy = flow.v.get(y, x).trunc() as isize;
        g_i.get_clamped(y as isize + dy, x as isize + dx)
    }))
}

/// How `g̃` is evaluated between pixel centres during the translation fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
    /// Phase-ramp shift of the mirror-extended frame. The shift is unitary, so
    /// resampled noise keeps its variance at every sub-pixel offset.
    Fourier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub initial_damping: f64,
    /// Pixels this close to the border are left out of the fit.
    pub margin: usize,
    pub interpolation: Interpolation,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-6,
            initial_damping: 1e-3,
            margin: 0,
            interpolation: Interpolation::Bilinear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TranslationEstimate {
    pub s_x: f64,
    pub s_y: f64,
    pub final_sse: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn central_gradients(g: &ImageGrid) -> (ImageGrid, ImageGrid) {
    let gx = ImageGrid::from_fn(g.height(), g.width(), |y, x| {
        let (y, x) = (y as isize, x as isize);
        0.5 * (g.get_clamped(y, x + 1) - g.get_clamped(y, x - 1))
    });
    let gy = ImageGrid::from_fn(g.height(), g.width(), |y, x| {
        let (y, x) = (y as isize, x as isize);
        0.5 * (g.get_clamped(y + 1, x) - g.get_clamped(y - 1, x))
    });
    (gx, gy)
}

/// Evaluates `g̃(x − s)` and its spatial gradient.
enum Sampler<'a> {
    Bilinear {
        g: &'a ImageGrid,
        grads: (ImageGrid, ImageGrid),
    },
    Fourier {
        h: usize,
        w: usize,
        spectrum: Vec<Complex64>,
        fft: Fft2,
    },
}

impl<'a> Sampler<'a> {
    fn new(g: &'a ImageGrid, kind: Interpolation) -> Self {
        match kind {
            Interpolation::Bilinear => Sampler::Bilinear {
                g,
                grads: central_gradients(g),
            },
            Interpolation::Fourier => {
                let (h, w) = (g.height(), g.width());
                let (h2, w2) = (2 * h, 2 * w);
                let mut spectrum: Vec<Complex64> = (0..h2 * w2)
                    .map(|i| {
                        let (x, y) = (i / h2, i % h2);
                        let (xs, ys) = (x.min(w2 - 1 - x), y.min(h2 - 1 - y));
                        Complex64::new(g.get(ys, xs), 0.0)
                    })
                    .collect();
                let fft = Fft2::new(h2, w2);
                fft.process(&mut spectrum, false);
                Sampler::Fourier { h, w, spectrum, fft }
            }
        }
    }

    fn height(&self) -> usize {
        match self {
            Sampler::Bilinear { g, .. } => g.height(),
            Sampler::Fourier { h, .. } => *h,
        }
    }

    fn width(&self) -> usize {
        match self {
            Sampler::Bilinear { g, .. } => g.width(),
            Sampler::Fourier { w, .. } => *w,
        }
    }

    /// Values (and gradients if asked) on the grid; `None` where `x − s` leaves the domain.
    fn shifted(&self, s: Vector2<f64>, with_grad: bool) -> Vec<Option<(f64, f64, f64)>> {
        let (h, w) = (self.height(), self.width());
        let inside = |y: usize, x: usize| {
            let (py, px) = (y as f64 - s[1], x as f64 - s[0]);
            (0.0..=(h - 1) as f64).contains(&py) && (0.0..=(w - 1) as f64).contains(&px)
        };
        match self {
            Sampler::Bilinear { g, grads } => (0..h * w)
                .map(|i| {
                    let (x, y) = (i / h, i % h);
                    let (py, px) = (y as f64 - s[1], x as f64 - s[0]);
                    let v = g.sample_bilinear(py, px)?;
                    let (gx, gy) = if with_grad {
                        (
                            grads.0.sample_bilinear(py, px).unwrap_or(0.0),
                            grads.1.sample_bilinear(py, px).unwrap_or(0.0),
                        )
                    } else {
                        (0.0, 0.0)
                    };
                    Some((v, gx, gy))
                })
                .collect(),
            Sampler::Fourier { spectrum, fft, .. } => {
                let (h2, w2) = (2 * h, 2 * w);
                let freq = |k: usize, n: usize| {
                    let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
                    std::f64::consts::TAU * k / n as f64
                };
                let mut planes = vec![Vec::with_capacity(h2 * w2); if with_grad { 3 } else { 1 }];
                for (i, c) in spectrum.iter().enumerate() {
                    let (kx, ky) = (i / h2, i % h2);
                    let (wx, wy) = (freq(kx, w2), freq(ky, h2));
                    let shifted = c * Complex64::from_polar(1.0, -(wx * s[0] + wy * s[1]));
                    planes[0].push(shifted);
                    if with_grad {
                        let nyq_x = w2 % 2 == 0 && kx == w2 / 2;
                        let nyq_y = h2 % 2 == 0 && ky == h2 / 2;
                        let dx = if nyq_x { 0.0 } else { wx };
                        let dy = if nyq_y { 0.0 } else { wy };
                        planes[1].push(shifted * Complex64::new(0.0, dx));
                        planes[2].push(shifted * Complex64::new(0.0, dy));
                    }
                }
                let scale = 1.0 / (h2 * w2) as f64;
                for p in planes.iter_mut() {
                    fft.process(p, true);
                }
                (0..h * w)
                    .map(|i| {
                        let (x, y) = (i / h, i % h);
                        if !inside(y, x) {
                            return None;
                        }
                        let j = x * h2 + y;
                        let at = |k: usize| planes.get(k).map_or(0.0, |p| p[j].re * scale);
                        Some((at(0), at(1), at(2)))
                    })
                    .collect()
            }
        }
    }
}

fn in_margin(i: usize, h: usize, w: usize, margin: usize) -> bool {
    let (x, y) = (i / h, i % h);
    x >= margin && y >= margin && x + margin < w && y + margin < h
}

fn sse_at(sampler: &Sampler, g_0: &ImageGrid, s: Vector2<f64>, margin: usize) -> f64 {
    let (h, w) = (g_0.height(), g_0.width());
    sampler
        .shifted(s, false)
        .iter()
        .zip(g_0.as_slice())
        .enumerate()
        .filter(|(i, _)| in_margin(*i, h, w, margin))
        .filter_map(|(_, (v, g0))| v.map(|(v, _, _)| (v - g0) * (v - g0)))
        .sum()
}

/// Normal equations `JᵀJ`, `Jᵀe` of the residual `g̃(x − s) − g_0(x)`.
fn linearize(
    sampler: &Sampler,
    g_0: &ImageGrid,
    s: Vector2<f64>,
    margin: usize,
) -> (Matrix2<f64>, Vector2<f64>) {
    let (h, w) = (g_0.height(), g_0.width());
    let mut jtj = Matrix2::zeros();
    let mut jte = Vector2::zeros();
    for (i, (v, g0)) in sampler.shifted(s, true).iter().zip(g_0.as_slice()).enumerate() {
        let Some((v, gx, gy)) = *v else { continue };
        if !in_margin(i, h, w, margin) {
            continue;
        }
        let j = Vector2::new(-gx, -gy);
        jtj += j * j.transpose();
        jte += j * (v - g0);
    }
    (jtj, jte)
}

/// Levenberg–Marquardt fit of `s` minimizing `Σ [g̃(x − s) − g_0(x)]²`.
pub fn estimate_translation(
    g_tilde: &ImageGrid,
    g_0: &ImageGrid,
    cfg: &LmConfig,
) -> Result<TranslationEstimate> {
    if !g_tilde.same_shape(g_0) {
        return Err(Error::InvalidInput("translation inputs differ in size".into()));
    }
    if cfg.max_iters == 0 {
        return Err(Error::InvalidInput("max_iters must be >= 1".into()));
    }
    let sampler = Sampler::new(g_tilde, cfg.interpolation);
    let mut s = Vector2::zeros();
    let mut sse = sse_at(&sampler, g_0, s, cfg.margin);
    let mut mu = cfg.initial_damping;
    let (mut jtj, mut jte) = linearize(&sampler, g_0, s, cfg.margin);
    if !(jtj.trace() > 0.0) {
        return Ok(TranslationEstimate {
            s_x: 0.0,
            s_y: 0.0,
            final_sse: sse,
            iterations: 0,
            converged: false,
        });
    }

    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let mut damped = jtj;
        for k in 0..2 {
            damped[(k, k)] += mu * jtj[(k, k)].max(f64::MIN_POSITIVE);
        }
        let Some(step) = damped.try_inverse().map(|inv| -(inv * jte)) else {
            mu *= 10.0;
            continue;
        };
        if step.norm() < cfg.tol {
            converged = true;
            break;
        }
        let trial = s + step;
        let trial_sse = sse_at(&sampler, g_0, trial, cfg.margin);
        if trial_sse < sse {
            s = trial;
            sse = trial_sse;
            mu /= 10.0;
            (jtj, jte) = linearize(&sampler, g_0, s, cfg.margin);
        } else {
            mu *= 10.0;
            if mu > 1e12 {
                converged = true;
                break;
            }
        }
    }
    Ok(TranslationEstimate {
        s_x: s[0],
        s_y: s[1],
        final_sse: sse,
        iterations,
        converged,
    })
}

/// Full registration of one frame against the reference.
#[derive(Debug, Clone)]
pub struct FrameRegistration {
    pub flow: FlowField,
    pub restored: ImageGrid,
    pub translation: TranslationEstimate,
    /// `g(x) ≈ g_0(x + t)` in LR pixels.
    pub total_x: f64,
    pub total_y: f64,
}

/// LAP flow, restoration by the median integer flow, then the LM fit.
///
/// The restored frame is shifted uniformly: truncating a noisy per-pixel flow
/// near an integer boundary would mix two shifts in one image.
pub fn register_frame(
    g_i: &ImageGrid,
    g_0: &ImageGrid,
    bank: &LapFilterBank,
    lm: &LmConfig,
) -> Result<FrameRegistration> {
    let flow = lap_flow(g_i, g_0, bank)?;
    let (iu, iv) = flow.median_integer_flow();
    let uniform = FlowField::constant(g_i.height(), g_i.width(), iu as f64, iv as f64);
    let restored = resample_integer_flow(g_i, &uniform)?;
    let translation = estimate_translation(&restored, g_0, lm)?;
    Ok(FrameRegistration {
        total_x: translation.s_x - iu as f64,
        total_y: translation.s_y - iv as f64,
        flow,
        restored,
        translation,
    })
}

/// Registration of the reference against itself.
pub fn identity_registration(g_0: &ImageGrid) -> FrameRegistration {
    FrameRegistration {
        flow: FlowField::zeros(g_0.height(), g_0.width()),
        restored: g_0.clone(),
        translation: TranslationEstimate {
            s_x: 0.0,
            s_y: 0.0,
            final_sse: 0.0,
            iterations: 0,
            converged: true,
        },
        total_x: 0.0,
        total_y: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    /// Band-limited test scene sampled at `(y + dy, x + dx)`.
    fn scene(h: usize, w: usize, dy: f64, dx: f64) -> ImageGrid {
        ImageGrid::from_fn(h, w, |y, x| {
            let (y, x) = (y as f64 + dy, x as f64 + dx);
            let mut v = 100.0;
            for k in 0..14 {
                let kf = k as f64;
                let fx = 0.9 * (kf * 0.7).sin() / (1.0 + 0.4 * kf);
                let fy = 0.9 * (kf * 1.3 + 0.5).cos() / (1.0 + 0.4 * kf);
                v += 30.0 / (1.0 + 0.3 * kf) * (fx * x + fy * y + kf * 2.1).sin();
            }
            v
        })
    }

    fn periodic_scene(n: usize) -> ImageGrid {
        let nf = n as f64;
        ImageGrid::from_fn(n, n, |y, x| {
            let (y, x) = (2.0 * PI * y as f64 / nf, 2.0 * PI * x as f64 / nf);
            let mut v = 100.0;
            for a in 1..6 {
                for b in 0..5 {
                    let amp = 25.0 / (a * a + b * b) as f64;
                    v += amp * ((a as f64) * x + (b as f64) * y + (a * 3 + b) as f64).sin();
                    v += amp * ((b as f64) * x - (a as f64) * y + (a + 2 * b) as f64).cos();
                }
            }
            v
        })
    }

    #[test]
    fn bank_sigma_and_taps() {
        let bank = LapFilterBank::default();
        assert_eq!(bank.sigma(), 4.5);
        let s2 = 2.0 * 4.5f64 * 4.5;
        for &(k, l) in &[(0i64, 0i64), (3, -2), (-16, 16), (7, 11)] {
            let p0 = bank.tap(0, k, l);
            let (kf, lf) = (k as f64, l as f64);
            assert!((p0 - (-(kf * kf + lf * lf) / s2).exp()).abs() < 1e-15);
            assert!((bank.tap(1, k, l) - kf * p0).abs() < 1e-14);
            assert!((bank.tap(2, k, l) - lf * p0).abs() < 1e-14);
            assert!((bank.tap(3, k, l) - (kf * kf + lf * lf - s2) * p0).abs() < 1e-12);
            assert!((bank.tap(4, k, l) - kf * lf * p0).abs() < 1e-13);
            assert!((bank.tap(5, k, l) - (kf * kf - lf * lf) * p0).abs() < 1e-12);
        }
        assert_eq!(bank.tap(0, 17, 0), 0.0);
    }

    #[test]
    fn identical_frames_have_zero_flow() {
        let g = scene(40, 44, 0.0, 0.0);
        let bank = LapFilterBank::new(6).unwrap();
        let flow = lap_flow(&g, &g, &bank).unwrap();
        assert!(flow.u.as_slice().iter().all(|v| v.abs() <= 1e-8));
        assert!(flow.v.as_slice().iter().all(|v| v.abs() <= 1e-8));
    }

    #[test]
    fn cyclic_shift_gives_unit_flow() {
        let g0 = periodic_scene(64);
        let gi = ImageGrid::from_fn(64, 64, |y, x| g0.get_periodic(y as isize, x as isize - 1));
        let flow = lap_flow(&gi, &g0, &LapFilterBank::default()).unwrap();
        let mut us: Vec<f64> = flow.u.as_slice().to_vec();
        let mut vs: Vec<f64> = flow.v.as_slice().to_vec();
        us.sort_by(f64::total_cmp);
        vs.sort_by(f64::total_cmp);
        assert!((us[us.len() / 2] - 1.0).abs() < 0.15, "u median {}", us[us.len() / 2]);
        assert!(vs[vs.len() / 2].abs() < 0.15);
    }

    #[test]
    fn fractional_shift_flow_sign() {
        let g0 = scene(64, 64, 0.0, 0.0);
        // content moved by (+0.4, −1.6): g(x) = g_0(x − d)
        let gi = scene(64, 64, 1.6, -0.4);
        let flow = lap_flow(&gi, &g0, &LapFilterBank::default()).unwrap();
        let s = flow.summary();
        assert!((s.mean_u - 0.4).abs() < 0.05, "{s:?}");
        assert!((s.mean_v + 1.6).abs() < 0.05, "{s:?}");
        assert_eq!((s.integer_u, s.integer_v), (0, -1));
    }

    #[test]
    fn flow_rejects_small_or_mismatched() {
        let bank = LapFilterBank::default();
        let small = ImageGrid::zeros(20, 40);
        assert!(lap_flow(&small, &small, &bank).is_err());
        assert!(lap_flow(&ImageGrid::zeros(40, 40), &ImageGrid::zeros(40, 41), &bank).is_err());
    }

    #[test]
    fn resample_examples() {
        let ramp = ImageGrid::from_fn(4, 5, |y, x| (10 * x + y) as f64);
        let same = resample_integer_flow(&ramp, &FlowField::zeros(4, 5)).unwrap();
        assert_eq!(same, ramp);

        let shifted = resample_integer_flow(&ramp, &FlowField::constant(4, 5, 1.0, 0.0)).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(shifted.get(y, x), ramp.get(y, (x + 1).min(4)));
            }
        }

        let frac = resample_integer_flow(&ramp, &FlowField::constant(4, 5, 0.6, 0.4)).unwrap();
        assert_eq!(frac, ramp);
        let neg = resample_integer_flow(&ramp, &FlowField::constant(4, 5, -0.9, 0.0)).unwrap();
        assert_eq!(neg, ramp);
        assert!(resample_integer_flow(&ramp, &FlowField::zeros(5, 5)).is_err());
    }

    #[test]
    fn translation_identity() {
        let g = scene(32, 32, 0.0, 0.0);
        let est = estimate_translation(&g, &g, &LmConfig::default()).unwrap();
        assert_eq!((est.s_x, est.s_y), (0.0, 0.0));
        assert!(est.final_sse < 1e-20);
        assert!(est.converged);
    }

    #[test]
    fn translation_recovers_analytic_shift() {
        let g0 = scene(48, 48, 0.0, 0.0);
        let gt = scene(48, 48, -0.5, 0.25);
        let est = estimate_translation(&gt, &g0, &LmConfig::default()).unwrap();
        assert!((est.s_x - 0.25).abs() < 0.05, "{est:?}");
        assert!((est.s_y + 0.5).abs() < 0.05, "{est:?}");
        let initial = sse_at(&Sampler::new(&gt, Interpolation::Bilinear), &g0, Vector2::zeros(), 0);
        assert!(est.final_sse <= initial);
    }

    #[test]
    fn fourier_translation_recovers_analytic_shift() {
        let g0 = scene(48, 48, 0.0, 0.0);
        let gt = scene(48, 48, -0.5, 0.25);
        let cfg = LmConfig {
            interpolation: Interpolation::Fourier,
            margin: 4,
            ..LmConfig::default()
        };
        let est = estimate_translation(&gt, &g0, &cfg).unwrap();
        assert!((est.s_x - 0.25).abs() < 0.02, "{est:?}");
        assert!((est.s_y + 0.5).abs() < 0.02, "{est:?}");
    }

    #[test]
    fn fourier_sampler_is_exact_for_integer_shifts() {
        let g = scene(12, 10, 0.0, 0.0);
        let out = Sampler::new(&g, Interpolation::Fourier).shifted(Vector2::new(1.0, -2.0), true);
        for x in 0..10 {
            for y in 0..12 {
                let v = out[x * 12 + y];
                if x >= 1 && y + 2 < 12 {
                    let (val, _, _) = v.unwrap();
                    assert!((val - g.get(y + 2, x - 1)).abs() < 1e-9);
                } else {
                    assert!(v.is_none());
                }
            }
        }
    }

    #[test]
    fn prefilter_keeps_constants() {
        let flat = ImageGrid::filled(9, 11, 42.0);
        let out = gaussian_prefilter(&flat, 1.5);
        assert!(out.as_slice().iter().all(|v| (v - 42.0).abs() < 1e-12));
        let g = scene(9, 11, 0.0, 0.0);
        assert_eq!(gaussian_prefilter(&g, 0.0), g);
    }

    #[test]
    fn translation_sign_symmetry() {
        let a = scene(48, 48, 0.0, 0.0);
        let b = scene(48, 48, 0.3, -0.35);
        let ab = estimate_translation(&b, &a, &LmConfig::default()).unwrap();
        let ba = estimate_translation(&a, &b, &LmConfig::default()).unwrap();
        assert!((ab.s_x + ba.s_x).abs() < 0.05);
        assert!((ab.s_y + ba.s_y).abs() < 0.05);
    }

    #[test]
    fn translation_degenerate_image() {
        let flat = ImageGrid::filled(16, 16, 3.0);
        let est = estimate_translation(&flat, &flat, &LmConfig::default()).unwrap();
        assert_eq!((est.s_x, est.s_y, est.converged), (0.0, 0.0, false));
    }

    #[test]
    fn full_registration_recovers_total_shift() {
        let g0 = scene(64, 64, 0.0, 0.0);
        for &(tx, ty) in &[(1.3, -0.4), (-1.7, 0.6), (0.35, 1.45)] {
            let gi = scene(64, 64, ty, tx);
            let reg = register_frame(&gi, &g0, &LapFilterBank::default(), &LmConfig::default()).unwrap();
            assert!((reg.total_x - tx).abs() < 0.1, "{tx} {ty}: {:?}", (reg.total_x, reg.total_y));
            assert!((reg.total_y - ty).abs() < 0.1, "{tx} {ty}: {:?}", (reg.total_x, reg.total_y));
        }
    }

    #[test]
    fn identity_registration_keeps_reference() {
        let g0 = scene(8, 8, 0.0, 0.0);
        let reg = identity_registration(&g0);
        assert_eq!(reg.restored, g0);
        assert_eq!((reg.total_x, reg.total_y), (0.0, 0.0));
    }

    #[test]
    fn flow_text_dump_shape() {
        let f = FlowField::constant(3, 4, 0.5, -1.0);
        let (u, v) = f.to_text();
        assert_eq!(u.lines().count(), 3);
        assert_eq!(v.lines().next().unwrap().split_whitespace().count(), 4);
        assert_eq!(v.lines().next().unwrap().split_whitespace().next().unwrap().parse::<f64>().unwrap(), -1.0);
    }

    proptest! {
        #[test]
        fn resample_commutes_with_scaling(
            alpha in -3.0..3.0f64,
            u in -2.5..2.5f64,
            v in -2.5..2.5f64,
        ) {
            let g = scene(9, 7, 0.0, 0.0);
            let flow = FlowField::constant(9, 7, u, v);
            let lhs = resample_integer_flow(&g.scaled(alpha), &flow).unwrap();
            let rhs = resample_integer_flow(&g, &flow).unwrap().scaled(alpha);
            prop_assert_eq!(lhs, rhs);
        }
    }
}
