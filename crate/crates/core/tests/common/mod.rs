//! Dense reference matrices built entry by entry from the block definitions.
//!
//! Vectors are column-major images, so an operator acting along x is the
//! outer Kronecker factor and one acting along y the inner one.

#![allow(dead_code)]

use mfsr::GridGeometry;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type ChaCha = ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `N_n(l) = [[0, I_{n-l}], [I_l, 0]]` with `l` reduced mod `n`.
pub fn cyclic_shift(n: usize, l: i64) -> DMatrix<f64> {
    let lt = l.rem_euclid(n as i64) as usize;
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n - lt {
        a[(i, lt + i)] = 1.0;
    }
    for i in 0..lt {
        a[(n - lt + i, i)] = 1.0;
    }
    a
}

/// `T_n(eps)`: `1 - eps` on the diagonal, `eps` on the superdiagonal and in the corner.
pub fn toeplitz_shift(n: usize, eps: f64) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        a[(i, i)] += 1.0 - eps;
        a[(i, (i + 1) % n)] += eps;
    }
    a
}

/// `D_0(n)`: `n × rn`, row `i` has its single one at column `r i`.
pub fn down_1d(n: usize, r: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, r * n);
    for i in 0..n {
        a[(i, r * i)] = 1.0;
    }
    a
}

/// Periodic averaging with `v = [1/2, 1, …, 1, 1/2] / r`, first tap at `-floor(r/2)`.
pub fn blur_1d(n: usize, r: usize) -> DMatrix<f64> {
    if r == 1 {
        return DMatrix::identity(n, n);
    }
    let mut v = vec![1.0; r + 1];
    v[0] = 0.5;
    v[r] = 0.5;
    let start = -((r / 2) as i64);
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for (k, w) in v.iter().enumerate() {
            let j = (i as i64 + start + k as i64).rem_euclid(n as i64) as usize;
            a[(i, j)] += w / r as f64;
        }
    }
    a
}

/// `diag(0_{l_+ - l}, I, 0_{l_- + l})`.
pub fn window_1d(n: usize, l: i64, l_plus: i64, l_minus: i64) -> DMatrix<f64> {
    let top = (l_plus - l) as usize;
    let bottom = (l_minus + l) as usize;
    let mut a = DMatrix::zeros(n, n);
    for i in top..n - bottom {
        a[(i, i)] = 1.0;
    }
    a
}

pub fn kron(outer_x: &DMatrix<f64>, inner_y: &DMatrix<f64>) -> DMatrix<f64> {
    outer_x.kronecker(inner_y)
}

pub fn dense_down(g: GridGeometry) -> DMatrix<f64> {
    kron(&down_1d(g.n, g.r), &down_1d(g.m, g.r))
}

pub fn dense_blur(g: GridGeometry) -> DMatrix<f64> {
    kron(&blur_1d(g.hr_width(), g.r), &blur_1d(g.hr_height(), g.r))
}

pub fn dense_frac(g: GridGeometry, eps_x: f64, eps_y: f64) -> DMatrix<f64> {
    kron(&toeplitz_shift(g.hr_width(), eps_x), &toeplitz_shift(g.hr_height(), eps_y))
}

pub fn dense_shift(g: GridGeometry, l_x: i64, l_y: i64) -> DMatrix<f64> {
    kron(&cyclic_shift(g.hr_width(), l_x), &cyclic_shift(g.hr_height(), l_y))
}

pub fn dense_window(g: GridGeometry, l_x: i64, l_y: i64, bounds: mfsr::ops::WindowBounds) -> DMatrix<f64> {
    kron(
        &window_1d(g.hr_width(), l_x, bounds.l_plus_x, bounds.l_minus_x),
        &window_1d(g.hr_height(), l_y, bounds.l_plus_y, bounds.l_minus_y),
    )
}

/// `D K C_i` for one frame.
pub fn dense_forward(model: &mfsr::ops::FrameModel) -> DMatrix<f64> {
    let g = model.geom;
    let d = model.displacement;
    dense_down(g) * dense_blur(g) * dense_frac(g, d.eps_x, d.eps_y)
}

/// Matrix of a linear map given as a matvec, one unit vector at a time.
pub fn materialize(rows: usize, cols: usize, apply: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, cols);
    let mut e = vec![0.0; cols];
    for j in 0..cols {
        e[j] = 1.0;
        let col = apply(&e);
        assert_eq!(col.len(), rows);
        out.column_mut(j).copy_from_slice(&col);
        e[j] = 0.0;
    }
    out
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// `U max(Σ - τ, 0) Vᵀ` from nalgebra's full SVD.
pub fn dense_svt(x: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let s = DMatrix::from_diagonal(&svd.singular_values.map(|v| (v - tau).max(0.0)));
    u * s * vt
}

/// Every `(m, n, r)` with `r² m n <= limit`.
pub fn small_geometries(limit: usize) -> Vec<GridGeometry> {
    let mut out = Vec::new();
    for r in 1..=4usize {
        for m in 1..=limit {
            for n in 1..=limit {
                if r * r * m * n <= limit {
                    out.push(GridGeometry::new(m, n, r, 1).unwrap());
                }
            }
        }
    }
    out
}
