//! Structured linear operators of the observation model `g_i = D K C_i B_i f`.
//!
//! Nothing here is stored densely. Every operator acts on column-major
//! vectors of the HR grid (`r·m` rows, `r·n` columns) and, for the
//! downsampler, produces vectors on the LR grid (`m` rows, `n` columns).
//! Along each axis the blur, fractional shift and cyclic shift are periodic
//! correlations `out[j] = Σ_k w_k · x[(j + o_k) mod N]`.

use std::ops::Range;

use rustfft::num_complex::Complex64;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::error::{check_len, Error, Result};
use crate::grid::{Displacement, GridGeometry};

/// Taps `(offset, weight)` of a 1D periodic correlation.
pub type Taps = Vec<(isize, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Along a column (rows change), inner index of the vectorization.
    Y,
    /// Along a row (columns change), outer index of the vectorization.
    X,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorKind {
    Downsample,
    Blur { taps: Taps },
    FractionalShift { eps_x: f64, eps_y: f64 },
    CyclicShift { l_x: i64, l_y: i64 },
    Window { keep_x: Range<usize>, keep_y: Range<usize> },
    /// Product of factors, leftmost first: `[A, B]` applies `B` then `A`.
    Composite(Vec<StructuredOperator>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredOperator {
    geom: GridGeometry,
    in_dim: usize,
    out_dim: usize,
    kind: OperatorKind,
}

/// 1D periodic correlation along `axis` of an `h × w` column-major image.
pub(crate) fn correlate_axis(
    src: &[f64],
    dst: &mut [f64],
    h: usize,
    w: usize,
    axis: Axis,
    taps: &[(isize, f64)],
) {
    debug_assert_eq!(src.len(), h * w);
    debug_assert_eq!(dst.len(), h * w);
    match axis {
        Axis::Y => {
            for (scol, dcol) in src.chunks_exact(h).zip(dst.chunks_exact_mut(h)) {
                dcol.iter_mut().for_each(|v| *v = 0.0);
                for &(off, wt) in taps {
                    let shift = off.rem_euclid(h as isize) as usize;
                    // dcol[y] += wt * scol[(y + shift) % h], split to avoid the modulo
                    let (head, tail) = dcol.split_at_mut(h - shift);
                    for (d, s) in head.iter_mut().zip(&scol[shift..]) {
                        *d += wt * s;
                    }
                    for (d, s) in tail.iter_mut().zip(&scol[..shift]) {
                        *d += wt * s;
                    }
                }
            }
        }
        Axis::X => {
            for (x, dcol) in dst.chunks_exact_mut(h).enumerate() {
                dcol.iter_mut().for_each(|v| *v = 0.0);
                for &(off, wt) in taps {
                    let sx = (x as isize + off).rem_euclid(w as isize) as usize;
                    let scol = &src[sx * h..(sx + 1) * h];
                    for (d, s) in dcol.iter_mut().zip(scol) {
                        *d += wt * s;
                    }
                }
            }
        }
    }
}

fn adjoint_taps(taps: &[(isize, f64)]) -> Taps {
    taps.iter().map(|&(o, w)| (-o, w)).collect()
}

fn toeplitz_taps(eps: f64) -> Taps {
    vec![(0, 1.0 - eps), (1, eps)]
}

/// Taps of the separable averaging kernel `v = [1/2, 1, …, 1, 1/2] / r`.
///
/// The 2D kernel is `v vᵀ`, which sums to one. For `r = 1` it is the identity.
pub fn blur_taps(r: usize) -> Taps {
    if r <= 1 {
        return vec![(0, 1.0)];
    }
    let start = -((r / 2) as isize);
    let rf = r as f64;
    (0..=r)
        .map(|j| {
            let v = if j == 0 || j == r { 0.5 } else { 1.0 };
            (start + j as isize, v / rf)
        })
        .collect()
}

fn check_eps(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidInput(format!(
            "fractional shift {eps} outside [0, 1)"
        )));
    }
    Ok(())
}

/// `N_n(l) x`: entries of `x` cyclically shifted by `l`.
pub fn cyclic_shift_matvec(n: usize, l: i64, x: &[f64]) -> Result<Vec<f64>> {
    check_len(n, x.len())?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let lt = l.rem_euclid(n as i64) as usize;
    Ok((0..n).map(|j| x[(j + lt) % n]).collect())
}

/// `T_n(eps) x`: linear interpolation shifted by `eps`, with periodic wrap.
pub fn toeplitz_shift_matvec(n: usize, eps: f64, x: &[f64]) -> Result<Vec<f64>> {
    check_eps(eps)?;
    check_len(n, x.len())?;
    Ok((0..n)
        .map(|j| (1.0 - eps) * x[j] + eps * x[(j + 1) % n])
        .collect())
}

/// Frame-set extents `l_+ = max(0, max l)` and `l_- = max(0, max -l)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct WindowBounds {
    pub l_plus_x: i64,
    pub l_minus_x: i64,
    pub l_plus_y: i64,
    pub l_minus_y: i64,
}

impl WindowBounds {
    pub fn from_shifts<I: IntoIterator<Item = (i64, i64)>>(shifts: I) -> Self {
        let mut b = WindowBounds::default();
        for (lx, ly) in shifts {
            b.l_plus_x = b.l_plus_x.max(lx);
            b.l_minus_x = b.l_minus_x.max(-lx);
            b.l_plus_y = b.l_plus_y.max(ly);
            b.l_minus_y = b.l_minus_y.max(-ly);
        }
        b
    }

    pub fn from_displacements<'a, I: IntoIterator<Item = &'a Displacement>>(d: I) -> Self {
        Self::from_shifts(d.into_iter().map(|d| (d.l_x, d.l_y)))
    }
}

fn window_range(len: usize, l: i64, l_plus: i64, l_minus: i64, axis: &str) -> Result<Range<usize>> {
    let top = l_plus - l;
    let bottom = l_minus + l;
    let middle = len as i64 - l_plus - l_minus;
    if top < 0 || bottom < 0 || middle < 0 || l_plus < 0 || l_minus < 0 {
        return Err(Error::InvalidInput(format!(
            "window blocks along {axis} are negative: top {top}, middle {middle}, bottom {bottom}"
        )));
    }
    Ok(top as usize..(top + middle) as usize)
}

/// `D = D_0(n) ⊗ D_0(m)`: keeps the top-left HR pixel of every `r × r` cell.
pub fn build_downsampler(geom: GridGeometry) -> StructuredOperator {
    StructuredOperator {
        geom,
        in_dim: geom.hr_len(),
        out_dim: geom.lr_len(),
        kind: OperatorKind::Downsample,
    }
}

/// Periodic averaging blur `K` with unit-sum kernel `v vᵀ`.
pub fn build_blur(geom: GridGeometry) -> StructuredOperator {
    StructuredOperator {
        geom,
        in_dim: geom.hr_len(),
        out_dim: geom.hr_len(),
        kind: OperatorKind::Blur {
            taps: blur_taps(geom.r),
        },
    }
}

/// `C = T_{rn}(eps_x) ⊗ T_{rm}(eps_y)`.
pub fn build_fractional_shift(geom: GridGeometry, eps_x: f64, eps_y: f64) -> Result<StructuredOperator> {
    check_eps(eps_x)?;
    check_eps(eps_y)?;
    Ok(StructuredOperator {
        geom,
        in_dim: geom.hr_len(),
        out_dim: geom.hr_len(),
        kind: OperatorKind::FractionalShift { eps_x, eps_y },
    })
}

/// `B = N_{rn}(l_x) ⊗ N_{rm}(l_y)`.
pub fn build_integer_shift(geom: GridGeometry, l_x: i64, l_y: i64) -> StructuredOperator {
    StructuredOperator {
        geom,
        in_dim: geom.hr_len(),
        out_dim: geom.hr_len(),
        kind: OperatorKind::CyclicShift { l_x, l_y },
    }
}

/// `W = W^x ⊗ W^y`, the 0/1 mask of the part of frame `(l_x, l_y)` seen by every frame.
pub fn build_window(
    geom: GridGeometry,
    l_x: i64,
    l_y: i64,
    bounds: WindowBounds,
) -> Result<StructuredOperator> {
    let keep_x = window_range(geom.hr_width(), l_x, bounds.l_plus_x, bounds.l_minus_x, "x")?;
    let keep_y = window_range(geom.hr_height(), l_y, bounds.l_plus_y, bounds.l_minus_y, "y")?;
    Ok(StructuredOperator {
        geom,
        in_dim: geom.hr_len(),
        out_dim: geom.hr_len(),
        kind: OperatorKind::Window { keep_x, keep_y },
    })
}

impl StructuredOperator {
    /// Product `factors[0] · factors[1] · …`.
    pub fn compose(factors: Vec<StructuredOperator>) -> Result<StructuredOperator> {
        let first = factors
            .first()
            .ok_or_else(|| Error::InvalidInput("empty operator product".into()))?;
        let last = factors.last().expect("non-empty");
        for pair in factors.windows(2) {
            check_len(pair[0].in_dim, pair[1].out_dim)?;
        }
        Ok(StructuredOperator {
            geom: first.geom,
            in_dim: last.in_dim,
            out_dim: first.out_dim,
            kind: OperatorKind::Composite(factors),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geom
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.in_dim, x.len())?;
        let mut out = vec![0.0; self.out_dim];
        self.apply_into(x, &mut out, false);
        Ok(out)
    }

    pub fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len(self.out_dim, y.len())?;
        let mut out = vec![0.0; self.in_dim];
        self.apply_into(y, &mut out, true);
        Ok(out)
    }

    /// Unchecked matvec (`adjoint = false`) or adjoint matvec into `out`.
    pub(crate) fn apply_into(&self, x: &[f64], out: &mut [f64], adjoint: bool) {
        let (h, w) = (self.geom.hr_height(), self.geom.hr_width());
        match &self.kind {
            OperatorKind::Downsample => {
                let (m, n, r) = (self.geom.m, self.geom.n, self.geom.r);
                if adjoint {
                    out.iter_mut().for_each(|v| *v = 0.0);
                    for xl in 0..n {
                        for yl in 0..m {
                            out[r * xl * h + r * yl] = x[xl * m + yl];
                        }
                    }
                } else {
                    for xl in 0..n {
                        for yl in 0..m {
                            out[xl * m + yl] = x[r * xl * h + r * yl];
                        }
                    }
                }
            }
            OperatorKind::Blur { taps } => {
                let taps = if adjoint { adjoint_taps(taps) } else { taps.clone() };
                separable(x, out, h, w, &taps, &taps);
            }
            OperatorKind::FractionalShift { eps_x, eps_y } => {
                let (mut tx, mut ty) = (toeplitz_taps(*eps_x), toeplitz_taps(*eps_y));
                if adjoint {
                    tx = adjoint_taps(&tx);
                    ty = adjoint_taps(&ty);
                }
                separable(x, out, h, w, &ty, &tx);
            }
            OperatorKind::CyclicShift { l_x, l_y } => {
                let sign = if adjoint { -1 } else { 1 };
                let ly = (sign * l_y).rem_euclid(h as i64) as usize;
                let lx = (sign * l_x).rem_euclid(w as i64) as usize;
                for (xo, dcol) in out.chunks_exact_mut(h).enumerate() {
                    let xs = (xo + lx) % w;
                    let scol = &x[xs * h..(xs + 1) * h];
                    let (head, tail) = dcol.split_at_mut(h - ly);
                    head.copy_from_slice(&scol[ly..]);
                    tail.copy_from_slice(&scol[..ly]);
                }
            }
            OperatorKind::Window { keep_x, keep_y } => {
                for (xo, (dcol, scol)) in out.chunks_exact_mut(h).zip(x.chunks_exact(h)).enumerate() {
                    if keep_x.contains(&xo) {
                        for (yo, (d, s)) in dcol.iter_mut().zip(scol).enumerate() {
                            *d = if keep_y.contains(&yo) { *s } else { 0.0 };
                        }
                    } else {
                        dcol.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
            OperatorKind::Composite(factors) => {
                let mut cur = x.to_vec();
                let order: Box<dyn Iterator<Item = &StructuredOperator>> = if adjoint {
                    Box::new(factors.iter())
                } else {
                    Box::new(factors.iter().rev())
                };
                for f in order {
                    let len = if adjoint { f.in_dim } else { f.out_dim };
                    let mut next = vec![0.0; len];
                    f.apply_into(&cur, &mut next, adjoint);
                    cur = next;
                }
                out.copy_from_slice(&cur);
            }
        }
    }

    /// 2D periodic correlation taps `(dy, dx, w)` when the operator is circulant on the HR grid.
    pub fn circulant_taps(&self) -> Option<Vec<(isize, isize, f64)>> {
        let outer = |ty: &[(isize, f64)], tx: &[(isize, f64)]| {
            let mut out = Vec::with_capacity(ty.len() * tx.len());
            for &(ox, wx) in tx {
                for &(oy, wy) in ty {
                    out.push((oy, ox, wy * wx));
                }
            }
            out
        };
        match &self.kind {
            OperatorKind::Blur { taps } => Some(outer(taps, taps)),
            OperatorKind::FractionalShift { eps_x, eps_y } => {
                Some(outer(&toeplitz_taps(*eps_y), &toeplitz_taps(*eps_x)))
            }
            OperatorKind::CyclicShift { l_x, l_y } => Some(vec![(*l_y as isize, *l_x as isize, 1.0)]),
            _ => None,
        }
    }

    /// Eigenvalues of a circulant operator: the 2D DFT of its first column.
    ///
    /// Returned column-major on the HR grid. `None` for non-circulant kinds.
    pub fn spectral_diagonal(&self) -> Option<Vec<Complex64>> {
        let taps = self.circulant_taps()?;
        let (h, w) = (self.geom.hr_height(), self.geom.hr_width());
        let mut col = vec![Complex64::new(0.0, 0.0); h * w];
        for (dy, dx, wt) in taps {
            // (A x)[j] = Σ w x[j + o]  ⇒  A[j, 0] = w at j ≡ -o
            let y = (-dy).rem_euclid(h as isize) as usize;
            let x = (-dx).rem_euclid(w as isize) as usize;
            col[x * h + y] += wt;
        }
        fft2(&mut col, h, w, false);
        Some(col)
    }

    /// Matvec through the Fourier diagonal: `F⁻¹ diag(λ) F x`.
    pub fn apply_spectral(&self, x: &[f64], adjoint: bool) -> Option<Result<Vec<f64>>> {
        let diag = self.spectral_diagonal()?;
        if let Err(e) = check_len(self.in_dim, x.len()) {
            return Some(Err(e));
        }
        let (h, w) = (self.geom.hr_height(), self.geom.hr_width());
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2(&mut buf, h, w, false);
        for (b, d) in buf.iter_mut().zip(&diag) {
            *b *= if adjoint { d.conj() } else { *d };
        }
        fft2(&mut buf, h, w, true);
        let scale = 1.0 / (h * w) as f64;
        Some(Ok(buf.iter().map(|c| c.re * scale).collect()))
    }
}

fn separable(x: &[f64], out: &mut [f64], h: usize, w: usize, taps_y: &[(isize, f64)], taps_x: &[(isize, f64)]) {
    let mut tmp = vec![0.0; h * w];
    correlate_axis(x, &mut tmp, h, w, Axis::Y, taps_y);
    correlate_axis(&tmp, out, h, w, Axis::X, taps_x);
}

/// Unnormalized 2D DFT of a column-major `h × w` array, in place.
pub(crate) fn fft2(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    Fft2::new(h, w).process(data, inverse);
}

/// Planned 2D FFT for one grid size.
#[derive(Clone)]
pub(crate) struct Fft2 {
    h: usize,
    w: usize,
    fwd: (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>),
    inv: (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>),
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}x{})", self.h, self.w)
    }
}

impl Fft2 {
    pub(crate) fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        Self {
            h,
            w,
            fwd: (planner.plan_fft_forward(h), planner.plan_fft_forward(w)),
            inv: (planner.plan_fft_inverse(h), planner.plan_fft_inverse(w)),
        }
    }

    pub(crate) fn process(&self, data: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let (fh, fw) = if inverse { &self.inv } else { &self.fwd };
        for col in data.chunks_exact_mut(h) {
            fh.process(col);
        }
        let mut row = vec![Complex64::new(0.0, 0.0); w];
        for y in 0..h {
            for x in 0..w {
                row[x] = data[x * h + y];
            }
            fw.process(&mut row);
            for x in 0..w {
                data[x * h + y] = row[x];
            }
        }
    }
}

/// Everything needed to apply frame `i`'s part of the model.
///
/// Holds `D`, `K`, `C_i`, `B_i`, `W_i`. Frame unknowns `f_i` live in frame
/// coordinates (`f_i = B_i f`); [`FrameModel::align`] maps `W_i f_i` back
/// onto the reference grid so that all columns of the low-rank stack line up.
#[derive(Debug, Clone)]
pub struct FrameModel {
    pub geom: GridGeometry,
    pub displacement: Displacement,
    pub down: StructuredOperator,
    pub blur: StructuredOperator,
    pub frac: StructuredOperator,
    pub shift: StructuredOperator,
    pub window: StructuredOperator,
    /// Fourier eigenvalues of `K C_i`.
    spectrum: Vec<Complex64>,
    fft: Fft2,
}

/// Scratch space for [`FrameModel`] matvecs.
#[derive(Debug, Clone)]
pub struct Workspace {
    hr_a: Vec<f64>,
    hr_b: Vec<f64>,
    lr: Vec<f64>,
}

impl Workspace {
    pub fn new(geom: GridGeometry) -> Self {
        Self {
            hr_a: vec![0.0; geom.hr_len()],
            hr_b: vec![0.0; geom.hr_len()],
            lr: vec![0.0; geom.lr_len()],
        }
    }
}

impl FrameModel {
    pub fn new(geom: GridGeometry, displacement: Displacement, bounds: WindowBounds) -> Result<Self> {
        let blur = build_blur(geom);
        let frac = build_fractional_shift(geom, displacement.eps_x, displacement.eps_y)?;
        let spectrum = blur
            .spectral_diagonal()
            .expect("blur is circulant")
            .iter()
            .zip(frac.spectral_diagonal().expect("fractional shift is circulant"))
            .map(|(k, c)| k * c)
            .collect();
        Ok(Self {
            geom,
            displacement,
            down: build_downsampler(geom),
            blur,
            frac,
            shift: build_integer_shift(geom, displacement.l_x, displacement.l_y),
            window: build_window(geom, displacement.l_x, displacement.l_y, bounds)?,
            spectrum,
            fft: Fft2::new(geom.hr_height(), geom.hr_width()),
        })
    }

    /// `(Aᵀ DᵀD A + weight · I)⁻¹ x` with `A = K C_i`, exact in the Fourier domain.
    ///
    /// `DᵀD` couples the `r²` frequencies that alias onto one LR frequency, so each
    /// such class is an identity-plus-rank-one block inverted by Sherman–Morrison.
    /// This equals `M_i⁻¹` whenever the window is the identity, and is used as the
    /// CG preconditioner otherwise. Requires `weight > 0`.
    pub fn precondition(&self, x: &[f64], weight: f64) -> Vec<f64> {
        let (m, n, r) = (self.geom.m, self.geom.n, self.geom.r);
        let h = self.geom.hr_height();
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.process(&mut buf, false);
        let rr = (r * r) as f64;
        let mut idx = Vec::with_capacity(r * r);
        for kx in 0..n {
            for ky in 0..m {
                idx.clear();
                for b in 0..r {
                    for a in 0..r {
                        idx.push((kx + b * n) * h + ky + a * m);
                    }
                }
                let mut proj = Complex64::new(0.0, 0.0);
                let mut norm2 = 0.0;
                for &i in &idx {
                    // v = conj(spectrum), so vᴴ y = Σ spectrum · y
                    proj += self.spectrum[i] * buf[i];
                    norm2 += self.spectrum[i].norm_sqr();
                }
                let coef = proj / (weight * rr + norm2);
                for &i in &idx {
                    buf[i] = (buf[i] - self.spectrum[i].conj() * coef) / weight;
                }
            }
        }
        self.fft.process(&mut buf, true);
        let scale = 1.0 / self.geom.hr_len() as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }

    /// `D K C_i f` into `out` (LR length).
    pub fn forward_into(&self, f: &[f64], out: &mut [f64], ws: &mut Workspace) {
        self.frac.apply_into(f, &mut ws.hr_a, false);
        self.blur.apply_into(&ws.hr_a, &mut ws.hr_b, false);
        self.down.apply_into(&ws.hr_b, out, false);
    }

    /// `(D K C_i)ᵀ g` into `out` (HR length).
    pub fn adjoint_into(&self, g: &[f64], out: &mut [f64], ws: &mut Workspace) {
        self.down.apply_into(g, &mut ws.hr_a, true);
        self.blur.apply_into(&ws.hr_a, &mut ws.hr_b, true);
        self.frac.apply_into(&ws.hr_b, out, true);
    }

    pub fn forward(&self, f: &[f64]) -> Result<Vec<f64>> {
        check_len(self.geom.hr_len(), f.len())?;
        let mut ws = Workspace::new(self.geom);
        let mut out = vec![0.0; self.geom.lr_len()];
        self.forward_into(f, &mut out, &mut ws);
        Ok(out)
    }

    pub fn adjoint(&self, g: &[f64]) -> Result<Vec<f64>> {
        check_len(self.geom.lr_len(), g.len())?;
        let mut ws = Workspace::new(self.geom);
        let mut out = vec![0.0; self.geom.hr_len()];
        self.adjoint_into(g, &mut out, &mut ws);
        Ok(out)
    }

    /// `M_i f = (D K C_i)ᵀ D K C_i f + weight · W_iᵀ W_i f`.
    pub fn normal_into(&self, f: &[f64], weight: f64, out: &mut [f64], ws: &mut Workspace) {
        let mut lr = std::mem::take(&mut ws.lr);
        self.forward_into(f, &mut lr, ws);
        self.adjoint_into(&lr, out, ws);
        ws.lr = lr;
        if weight != 0.0 {
            self.window.apply_into(f, &mut ws.hr_a, false);
            for (o, m) in out.iter_mut().zip(&ws.hr_a) {
                *o += weight * m;
            }
        }
    }

    /// `B_iᵀ W_i f`: the masked frame unknown on the reference grid.
    pub fn align(&self, f: &[f64]) -> Vec<f64> {
        let mut tmp = vec![0.0; f.len()];
        let mut out = vec![0.0; f.len()];
        self.window.apply_into(f, &mut tmp, false);
        self.shift.apply_into(&tmp, &mut out, true);
        out
    }

    /// `W_iᵀ B_i h`: adjoint of [`FrameModel::align`].
    pub fn unalign(&self, h: &[f64]) -> Vec<f64> {
        let mut tmp = vec![0.0; h.len()];
        let mut out = vec![0.0; h.len()];
        self.shift.apply_into(h, &mut tmp, false);
        self.window.apply_into(&tmp, &mut out, false);
        out
    }

    /// `B_iᵀ f`: the full frame unknown on the reference grid.
    pub fn to_reference(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; f.len()];
        self.shift.apply_into(f, &mut out, true);
        out
    }

    /// Whether reference pixel `(y, x)` of [`FrameModel::to_reference`] comes from
    /// inside this frame's unknown rather than from the periodic wrap-around.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let (h, w) = (self.geom.hr_height() as i64, self.geom.hr_width() as i64);
        let sy = y as i64 - self.displacement.l_y;
        let sx = x as i64 - self.displacement.l_x;
        (0..h).contains(&sy) && (0..w).contains(&sx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn norm(a: &[f64]) -> f64 {
        dot(a, a).sqrt()
    }

    #[test]
    fn cyclic_shift_examples() {
        assert_eq!(cyclic_shift_matvec(3, 0, &[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(cyclic_shift_matvec(3, 1, &[1.0, 2.0, 3.0]).unwrap(), vec![2.0, 3.0, 1.0]);
        assert_eq!(cyclic_shift_matvec(3, -1, &[1.0, 2.0, 3.0]).unwrap(), vec![3.0, 1.0, 2.0]);
        assert!(cyclic_shift_matvec(3, 1, &[1.0]).is_err());
    }

    #[test]
    fn toeplitz_examples() {
        let x = [4.0, -1.0, 2.5];
        assert_eq!(toeplitz_shift_matvec(3, 0.0, &x).unwrap(), x.to_vec());
        assert_eq!(
            toeplitz_shift_matvec(3, 0.25, &[1.0, 0.0, 0.0]).unwrap(),
            vec![0.75, 0.0, 0.25]
        );
        assert_eq!(
            toeplitz_shift_matvec(4, 0.5, &[2.0, 4.0, 6.0, 8.0]).unwrap(),
            vec![3.0, 5.0, 7.0, 5.0]
        );
        assert!(toeplitz_shift_matvec(3, 1.0, &x).is_err());
        assert!(toeplitz_shift_matvec(3, -0.1, &x).is_err());
    }

    #[test]
    fn blur_kernel_sums_to_one() {
        assert_eq!(blur_taps(1), vec![(0, 1.0)]);
        assert_eq!(blur_taps(2), vec![(-1, 0.25), (0, 0.5), (1, 0.25)]);
        for r in 1..6 {
            let s: f64 = blur_taps(r).iter().map(|t| t.1).sum();
            assert!((s - 1.0).abs() < 1e-15);
            assert_eq!(blur_taps(r).len(), if r == 1 { 1 } else { r + 1 });
        }
    }

    #[test]
    fn blur_preserves_constants() {
        for r in 1..5 {
            let geom = GridGeometry::new(3, 4, r, 1).unwrap();
            let k = build_blur(geom);
            let out = k.apply(&vec![7.5; geom.hr_len()]).unwrap();
            assert!(out.iter().all(|v| (v - 7.5).abs() < 1e-12));
        }
    }

    #[test]
    fn downsampler_picks_cell_corner() {
        let geom = GridGeometry::new(1, 1, 2, 1).unwrap();
        let d = build_downsampler(geom);
        assert_eq!(d.apply(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0]);

        let geom = GridGeometry::new(2, 3, 1, 1).unwrap();
        let x: Vec<f64> = (0..6).map(f64::from).collect();
        assert_eq!(build_downsampler(geom).apply(&x).unwrap(), x);
    }

    #[test]
    fn downsample_after_upsample_is_identity() {
        let geom = GridGeometry::new(3, 5, 3, 1).unwrap();
        let d = build_downsampler(geom);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random_vec(&mut rng, geom.lr_len());
        let back = d.apply(&d.apply_adjoint(&y).unwrap()).unwrap();
        assert_eq!(back, y);
    }

    #[test]
    fn shift_full_wrap_is_identity() {
        let geom = GridGeometry::new(3, 4, 2, 1).unwrap();
        let b = build_integer_shift(geom, geom.hr_width() as i64, -(geom.hr_height() as i64));
        let x: Vec<f64> = (0..geom.hr_len()).map(|i| i as f64).collect();
        assert_eq!(b.apply(&x).unwrap(), x);
    }

    #[test]
    fn shift_is_orthogonal() {
        let geom = GridGeometry::new(3, 4, 2, 1).unwrap();
        let b = build_integer_shift(geom, 3, -5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_vec(&mut rng, geom.hr_len());
        let back = b.apply_adjoint(&b.apply(&x).unwrap()).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn window_masks_expected_entries() {
        // 1D along x: two frames with l = 1 and l = -1 give l_+ = l_- = 1.
        let geom = GridGeometry::new(1, 3, 2, 2).unwrap();
        let bounds = WindowBounds::from_shifts([(1, 0), (-1, 0)]);
        assert_eq!(bounds.l_plus_x, 1);
        assert_eq!(bounds.l_minus_x, 1);
        let ones = vec![1.0; geom.hr_len()];
        let w1 = build_window(geom, 1, 0, bounds).unwrap();
        let w2 = build_window(geom, -1, 0, bounds).unwrap();
        // HR width 6, height 2: column-major, so each column contributes two entries
        let cols = |v: Vec<f64>| v.chunks(2).map(|c| c[0]).collect::<Vec<_>>();
        assert_eq!(cols(w1.apply(&ones).unwrap()), vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(cols(w2.apply(&ones).unwrap()), vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn window_rejects_negative_blocks() {
        let geom = GridGeometry::new(2, 2, 2, 1).unwrap();
        let bad = WindowBounds { l_plus_x: 0, l_minus_x: 0, l_plus_y: 0, l_minus_y: 0 };
        assert!(build_window(geom, 1, 0, bad).is_err());
        let too_wide = WindowBounds { l_plus_x: 3, l_minus_x: 3, l_plus_y: 0, l_minus_y: 0 };
        assert!(build_window(geom, 0, 0, too_wide).is_err());
    }

    #[test]
    fn window_all_zero_shift_is_identity() {
        let geom = GridGeometry::new(2, 3, 2, 1).unwrap();
        let w = build_window(geom, 0, 0, WindowBounds::default()).unwrap();
        let x: Vec<f64> = (0..geom.hr_len()).map(|i| i as f64 + 0.5).collect();
        assert_eq!(w.apply(&x).unwrap(), x);
    }

    #[test]
    fn adjoint_identity_for_every_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = GridGeometry::new(5, 4, 3, 1).unwrap();
        let bounds = WindowBounds::from_shifts([(2, -1), (-1, 3)]);
        let ops = vec![
            build_downsampler(geom),
            build_blur(geom),
            build_fractional_shift(geom, 0.3, 0.8).unwrap(),
            build_integer_shift(geom, -4, 7),
            build_window(geom, 2, -1, bounds).unwrap(),
            StructuredOperator::compose(vec![
                build_downsampler(geom),
                build_blur(geom),
                build_fractional_shift(geom, 0.1, 0.6).unwrap(),
                build_integer_shift(geom, 1, 1),
            ])
            .unwrap(),
        ];
        for op in &ops {
            let x = random_vec(&mut rng, op.in_dim());
            let y = random_vec(&mut rng, op.out_dim());
            let lhs = dot(&op.apply(&x).unwrap(), &y);
            let rhs = dot(&x, &op.apply_adjoint(&y).unwrap());
            assert!(
                (lhs - rhs).abs() <= 1e-10 * norm(&x) * norm(&y),
                "{:?}: {lhs} vs {rhs}",
                op.kind()
            );
        }
    }

    #[test]
    fn odd_factor_blur_is_not_symmetric_but_adjoint_holds() {
        let geom = GridGeometry::new(2, 2, 3, 1).unwrap();
        let k = build_blur(geom);
        let mut e = vec![0.0; geom.hr_len()];
        e[7] = 1.0;
        assert_ne!(k.apply(&e).unwrap(), k.apply_adjoint(&e).unwrap());
    }

    #[test]
    fn spectral_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let geom = GridGeometry::new(4, 3, 2, 1).unwrap();
        for op in [
            build_blur(geom),
            build_fractional_shift(geom, 0.35, 0.9).unwrap(),
            build_integer_shift(geom, 2, -3),
        ] {
            let x = random_vec(&mut rng, geom.hr_len());
            for adjoint in [false, true] {
                let direct = if adjoint { op.apply_adjoint(&x) } else { op.apply(&x) }.unwrap();
                let spec = op.apply_spectral(&x, adjoint).unwrap().unwrap();
                for (a, b) in direct.iter().zip(&spec) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
        assert!(build_downsampler(geom).spectral_diagonal().is_none());
    }

    #[test]
    fn frame_model_align_roundtrip() {
        let geom = GridGeometry::new(3, 3, 2, 2).unwrap();
        let d = Displacement::new(0.75, -0.4, 2).unwrap();
        let bounds = WindowBounds::from_displacements([&d, &Displacement::zero()]);
        let fm = FrameModel::new(geom, d, bounds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_vec(&mut rng, geom.hr_len());
        let h = random_vec(&mut rng, geom.hr_len());
        let lhs = dot(&fm.align(&f), &h);
        let rhs = dot(&f, &fm.unalign(&h));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn operators_reject_wrong_lengths() {
        let geom = GridGeometry::new(2, 2, 2, 1).unwrap();
        assert!(build_blur(geom).apply(&[1.0; 3]).is_err());
        assert!(build_downsampler(geom).apply_adjoint(&[1.0; 16]).is_err());
    }

    #[test]
    fn preconditioner_inverts_normal_matrix_without_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for &(m, n, r) in &[(4usize, 3usize, 2usize), (3, 5, 3), (6, 4, 1)] {
            let geom = GridGeometry::new(m, n, r, 1).unwrap();
            // integer part zero, so the window is all ones
            let d = Displacement::new(0.37 / r as f64, 0.81 / r as f64, r).unwrap();
            let model = FrameModel::new(geom, d, WindowBounds::from_displacements([&d])).unwrap();
            let x = random_vec(&mut rng, geom.hr_len());
            let mut mx = vec![0.0; geom.hr_len()];
            let mut ws = Workspace::new(geom);
            model.normal_into(&x, 0.01, &mut mx, &mut ws);
            let back = model.precondition(&mx, 0.01);
            let err: Vec<f64> = back.iter().zip(&x).map(|(a, b)| a - b).collect();
            assert!(norm(&err) < 1e-9 * norm(&x), "{m}x{n} r={r}: {}", norm(&err));
        }
    }

    #[test]
    fn to_reference_reads_unwrapped_pixels_where_covered() {
        let geom = GridGeometry::new(3, 4, 2, 1).unwrap();
        let d = Displacement::new(1.0, -0.5, 2).unwrap();
        let model = FrameModel::new(geom, d, WindowBounds::from_displacements([&d])).unwrap();
        let (h, w) = (geom.hr_height(), geom.hr_width());
        let f: Vec<f64> = (0..h * w).map(|i| i as f64).collect();
        let out = model.to_reference(&f);
        let mut covered = 0;
        for x in 0..w {
            for y in 0..h {
                if model.covers(y, x) {
                    covered += 1;
                    let (sy, sx) = ((y as i64 - d.l_y) as usize, (x as i64 - d.l_x) as usize);
                    assert_eq!(out[x * h + y], f[sx * h + sy]);
                }
            }
        }
        assert_eq!(covered, (h - 1) * (w - 2));
    }
}
