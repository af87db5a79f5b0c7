//! ADMM for the nuclear model
//!
//! ```text
//! min_F  λ ‖[B_1ᵀW_1 f_1, …, B_pᵀW_p f_p]‖_* + ½ Σ_i ‖g_i − D K C_i f_i‖²
//! ```
//!
//! Each iteration thresholds the singular values of the aligned stack,
//! solves `p` independent linear systems by preconditioned conjugate gradients and takes a
//! dual step with size `1/ρ`.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grid::{GridGeometry, ImageGrid};
use crate::ops::{FrameModel, Workspace};

/// Columns `p` vectors of length `r²mn`, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack(DMatrix<f64>);

impl FrameStack {
    pub fn zeros(len: usize, p: usize) -> Self {
        FrameStack(DMatrix::zeros(len, p))
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let len = columns
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidInput("frame stack needs at least one column".into()))?;
        for c in columns {
            check_len(len, c.len())?;
        }
        let data: Vec<f64> = columns.iter().flatten().copied().collect();
        Ok(FrameStack(DMatrix::from_vec(len, columns.len(), data)))
    }

    pub fn from_matrix(m: DMatrix<f64>) -> Self {
        FrameStack(m)
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        let n = self.0.nrows();
        &self.0.as_slice()[i * n..(i + 1) * n]
    }

    pub fn column_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.0.nrows();
        &mut self.0.as_mut_slice()[i * n..(i + 1) * n]
    }

    pub fn columns_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        let n = self.0.nrows();
        self.0.as_mut_slice().chunks_exact_mut(n)
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.as_slice().iter().all(|v| v.is_finite())
    }
}

/// Singular values (descending) and right singular vectors of a tall matrix.
///
/// Computed from the eigendecomposition of the `p × p` Gram matrix `XᵀX`.
pub fn gram_svd(x: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let mut gram = x.tr_mul(x);
    // exact symmetry for the eigensolver
    let p = gram.nrows();
    for i in 0..p {
        for j in 0..i {
            let s = 0.5 * (gram[(i, j)] + gram[(j, i)]);
            gram[(i, j)] = s;
            gram[(j, i)] = s;
        }
    }
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let sigma: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0).sqrt()).collect();
    let v = DMatrix::from_fn(p, p, |i, j| eig.eigenvectors[(i, order[j])]);
    (sigma, v)
}

pub fn singular_values(x: &DMatrix<f64>) -> Vec<f64> {
    gram_svd(x).0
}

pub fn nuclear_norm(x: &DMatrix<f64>) -> f64 {
    singular_values(x).iter().sum()
}

/// Singular value thresholding `U max(Σ − τ, 0) Vᵀ`.
///
/// Directions with `σ ≤ 1e-12 σ_max` are dropped; their output is zero anyway.
pub fn svt(x: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidInput(format!("SVT threshold {tau} must be >= 0")));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("SVT input has non-finite entries".into()));
    }
    if x.ncols() == 0 || x.nrows() == 0 {
        return Ok(x.clone());
    }
    let (sigma, v) = gram_svd(x);
    let sigma_max = sigma[0];
    let p = x.ncols();
    // U diag(s) Vᵀ = X V diag(s/σ) Vᵀ over the kept directions
    let mut q = DMatrix::<f64>::zeros(p, p);
    for (k, &s) in sigma.iter().enumerate() {
        if s <= 1e-12 * sigma_max || s <= 0.0 {
            continue;
        }
        let shrink = (s - tau).max(0.0) / s;
        if shrink == 0.0 {
            continue;
        }
        let vk = v.column(k);
        q += shrink * &vk * vk.transpose();
    }
    Ok(x * q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    Fixed(f64),
    /// Ratio of data misfit to nuclear norm; `per_iteration` re-estimates it every step.
    Auto { fallback: f64, per_iteration: bool },
}

/// How the multiplier enters the SVT argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierScaling {
    /// `H = SVT_{λρ}(WF − ρΛ)`, the minimizer of the augmented Lagrangian in `H`.
    Scaled,
    /// `H = SVT_{λρ}(WF − Λ)`.
    Unscaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub lambda: LambdaRule,
    pub rho: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub multiplier: MultiplierScaling,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: LambdaRule::Auto {
                fallback: 1.0,
                per_iteration: false,
            },
            rho: 400.0,
            max_iters: 50,
            rel_tol: 1e-4,
            cg_tol: 1e-8,
            cg_max_iters: 500,
            multiplier: MultiplierScaling::Scaled,
        }
    }
}

impl SolverConfig {
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = LambdaRule::Fixed(lambda);
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidInput(format!("solver config: {what}")));
        if !(self.rho > 0.0) {
            return bad("rho must be > 0");
        }
        if self.max_iters == 0 || self.cg_max_iters == 0 {
            return bad("iteration limits must be >= 1");
        }
        if !(self.rel_tol > 0.0 && self.cg_tol > 0.0) {
            return bad("tolerances must be > 0");
        }
        match self.lambda {
            LambdaRule::Fixed(l) if !(l >= 0.0 && l.is_finite()) => bad("lambda must be finite and >= 0"),
            LambdaRule::Auto { fallback, .. } if !(fallback >= 0.0) => bad("lambda fallback must be >= 0"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub objective: Vec<f64>,
    pub primal_residual: Vec<f64>,
    pub lambda: f64,
    pub rho: f64,
    pub wall_ms: f64,
    pub converged: bool,
    pub lambda_fallback: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgControl {
    pub tol: f64,
    pub max_iters: usize,
}

#[derive(Debug, Clone)]
pub struct FSolve {
    pub f: Vec<f64>,
    pub relative_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `M_i f = (DKC_i)ᵀ g + W_iᵀB_i Λ_i + (1/ρ) W_iᵀB_i h_i` by preconditioned conjugate gradients.
///
/// `h` and `lambda` are columns of the aligned stack (reference grid).
/// Non-convergence is reported through [`FSolve::converged`]; the iterate with
/// the smallest residual is returned.
pub fn solve_f_subproblem(
    model: &FrameModel,
    g: &[f64],
    h: &[f64],
    lambda: &[f64],
    rho: f64,
    cg: CgControl,
    warm: Option<&[f64]>,
) -> Result<FSolve> {
    let n = model.geom.hr_len();
    check_len(model.geom.lr_len(), g.len())?;
    check_len(n, h.len())?;
    check_len(n, lambda.len())?;
    if let Some(w) = warm {
        check_len(n, w.len())?;
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidInput(format!("rho {rho} must be > 0")));
    }
    let weight = 1.0 / rho;
    let mut ws = Workspace::new(model.geom);

    let mut rhs = vec![0.0; n];
    model.adjoint_into(g, &mut rhs, &mut ws);
    let lam_f = model.unalign(lambda);
    let h_f = model.unalign(h);
    for ((b, l), hv) in rhs.iter_mut().zip(&lam_f).zip(&h_f) {
        *b += l + weight * hv;
    }
    let b_norm = dot(&rhs, &rhs).sqrt();
    if b_norm == 0.0 {
        return Ok(FSolve {
            f: vec![0.0; n],
            relative_residual: 0.0,
            iterations: 0,
            converged: true,
        });
    }

    let mut x = warm.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
    let mut ax = vec![0.0; n];
    model.normal_into(&x, weight, &mut ax, &mut ws);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    // any SPD preconditioner is valid; keep it invertible when ρ = ∞
    let pre_weight = weight.max(1e-6);
    let mut z = model.precondition(&r, pre_weight);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut res = dot(&r, &r).sqrt();
    let target = cg.tol * b_norm;

    let mut best_res = res;
    let mut best_x = x.clone();
    let mut iterations = 0;
    while res > target && iterations < cg.max_iters {
        model.normal_into(&p, weight, &mut ap, &mut ws);
        let curv = dot(&p, &ap);
        if !(curv > 0.0 && rz > 0.0) {
            break;
        }
        let alpha = rz / curv;
        for ((xi, pi), (ri, api)) in x.iter_mut().zip(&p).zip(r.iter_mut().zip(&ap)) {
            *xi += alpha * pi;
            *ri -= alpha * api;
        }
        iterations += 1;
        res = dot(&r, &r).sqrt();
        if res < best_res {
            best_res = res;
            best_x.copy_from_slice(&x);
        }
        z = model.precondition(&r, pre_weight);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    let converged = best_res <= target;
    Ok(FSolve {
        f: best_x,
        relative_residual: best_res / b_norm,
        iterations,
        converged,
    })
}

/// Per-pixel mean of `B_iᵀ f_i` over the frames whose window contains the pixel.
///
/// Outside every window the unknowns are not tied to each other and the
/// iteration leaves them wherever the subproblem solves drift. Those pixels
/// take the mean of `B_iᵀ f⁰_i` over the frames that cover them without wrap.
pub fn fuse_columns(models: &[FrameModel], f: &FrameStack, init: &FrameStack) -> Vec<f64> {
    let h = models[0].geom.hr_height();
    let n = f.len();
    let ones = vec![1.0; n];
    let mut sum = vec![0.0; n];
    let mut count = vec![0u32; n];
    let mut fill = vec![0.0; n];
    let mut fill_count = vec![0u32; n];
    let mut all = vec![0.0; n];
    for (i, m) in models.iter().enumerate() {
        let mask = m.align(&ones);
        let est = m.to_reference(f.column(i));
        let start = m.to_reference(init.column(i));
        for k in 0..n {
            all[k] += start[k];
            if mask[k] > 0.5 {
                sum[k] += est[k];
                count[k] += 1;
            } else if m.covers(k % h, k / h) {
                fill[k] += start[k];
                fill_count[k] += 1;
            }
        }
    }
    let p = models.len() as f64;
    (0..n)
        .map(|k| match (count[k], fill_count[k]) {
            (c, _) if c > 0 => sum[k] / c as f64,
            (_, c) if c > 0 => fill[k] / c as f64,
            _ => all[k] / p,
        })
        .collect()
}

/// The aligned stack `[B_1ᵀW_1 f_1, …, B_pᵀW_p f_p]`.
pub fn aligned_stack(models: &[FrameModel], f: &FrameStack) -> FrameStack {
    let cols: Vec<Vec<f64>> = models
        .par_iter()
        .enumerate()
        .map(|(i, m)| m.align(f.column(i)))
        .collect();
    FrameStack::from_columns(&cols).expect("non-empty, equal-length columns")
}

/// `½ Σ ‖g_i − D K C_i f_i‖²`.
pub fn data_misfit(models: &[FrameModel], g: &[Vec<f64>], f: &FrameStack) -> f64 {
    let per_frame: Vec<f64> = models
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let pred = m.forward(f.column(i)).expect("stack matches geometry");
            pred.iter().zip(&g[i]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .collect();
    0.5 * per_frame.iter().sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaEstimate {
    pub value: f64,
    pub fallback_used: bool,
}

/// `λ ≈ ½ Σ ‖g_i − D K C_i f_i‖² / ‖W F‖_*`, or `fallback` when the nuclear norm vanishes.
pub fn estimate_lambda(
    f: &FrameStack,
    g: &[Vec<f64>],
    models: &[FrameModel],
    fallback: f64,
) -> Result<LambdaEstimate> {
    check_len(models.len(), f.ncols())?;
    check_len(models.len(), g.len())?;
    let denom = nuclear_norm(aligned_stack(models, f).as_matrix());
    if denom < 1e-12 {
        return Ok(LambdaEstimate {
            value: fallback,
            fallback_used: true,
        });
    }
    Ok(LambdaEstimate {
        value: data_misfit(models, g, f) / denom,
        fallback_used: false,
    })
}

/// `F⁰` with columns `C_iᵀ Kᵀ Dᵀ g_i`.
pub fn adjoint_init(models: &[FrameModel], g: &[Vec<f64>]) -> Result<FrameStack> {
    let cols = models
        .iter()
        .zip(g)
        .map(|(m, gi)| m.adjoint(gi))
        .collect::<Result<Vec<_>>>()?;
    FrameStack::from_columns(&cols)
}

/// `F⁰` with columns the bilinear upsampling of each frame on its own grid.
pub fn upsample_init(geom: GridGeometry, g: &[Vec<f64>]) -> Result<FrameStack> {
    let cols = g
        .iter()
        .map(|gi| {
            let img = ImageGrid::new(geom.m, geom.n, gi.clone())?;
            Ok(img.upsample_bilinear(geom.r).into_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    FrameStack::from_columns(&cols)
}

#[derive(Debug, Clone)]
pub struct AdmmOutput {
    /// Frame unknowns mapped back onto the reference grid and fused, see [`fuse_columns`].
    pub hr: ImageGrid,
    pub f: FrameStack,
    pub report: SolveReport,
}

/// Runs the ADMM iteration from `(F⁰, Λ⁰)` until `max_iters` or relative F-change below `rel_tol`.
pub fn admm_solve(
    g: &[Vec<f64>],
    models: &[FrameModel],
    cfg: &SolverConfig,
    f0: FrameStack,
    lambda0: FrameStack,
) -> Result<AdmmOutput> {
    let start = Instant::now();
    cfg.validate()?;
    let p = models.len();
    if p == 0 {
        return Err(Error::InvalidInput("no frames to solve".into()));
    }
    let geom = models[0].geom;
    if models.iter().any(|m| m.geom.m != geom.m || m.geom.n != geom.n || m.geom.r != geom.r) {
        return Err(Error::InvalidInput("frames do not share one geometry".into()));
    }
    check_len(p, g.len())?;
    for gi in g {
        check_len(geom.lr_len(), gi.len())?;
    }
    for s in [&f0, &lambda0] {
        check_len(p, s.ncols())?;
        check_len(geom.hr_len(), s.len())?;
    }

    let mut report = SolveReport {
        rho: cfg.rho,
        ..Default::default()
    };
    let (mut lambda, per_iteration, fallback) = match cfg.lambda {
        LambdaRule::Fixed(l) => (l, false, 0.0),
        LambdaRule::Auto {
            fallback,
            per_iteration,
        } => {
            let est = estimate_lambda(&f0, g, models, fallback)?;
            report.lambda_fallback = est.fallback_used;
            (est.value, per_iteration, fallback)
        }
    };

    let cg = CgControl {
        tol: cfg.cg_tol,
        max_iters: cfg.cg_max_iters,
    };
    let rho = cfg.rho;
    let init = f0.clone();
    let mut f = f0;
    let mut dual = lambda0;
    let mut wf = aligned_stack(models, &f);

    for k in 1..=cfg.max_iters {
        let dual_weight = match cfg.multiplier {
            MultiplierScaling::Scaled => rho,
            MultiplierScaling::Unscaled => 1.0,
        };
        let arg = wf.as_matrix() - dual_weight * dual.as_matrix();
        if !arg.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { iteration: k, what: "SVT argument" });
        }
        let h = FrameStack::from_matrix(svt(&arg, lambda * rho)?);
        if !h.is_finite() {
            return Err(Error::NonFinite { iteration: k, what: "H" });
        }

        let solves: Vec<Result<FSolve>> = (0..p)
            .into_par_iter()
            .map(|i| {
                solve_f_subproblem(
                    &models[i],
                    &g[i],
                    h.column(i),
                    dual.column(i),
                    rho,
                    cg,
                    Some(f.column(i)),
                )
            })
            .collect();
        let mut f_next = FrameStack::zeros(geom.hr_len(), p);
        for (i, s) in solves.into_iter().enumerate() {
            let s = s?;
            if !s.converged {
                report.warnings.push(format!(
                    "iteration {k}, frame {i}: CG stopped at relative residual {:.3e} after {} steps",
                    s.relative_residual, s.iterations
                ));
            }
            f_next.column_mut(i).copy_from_slice(&s.f);
        }
        if !f_next.is_finite() {
            return Err(Error::NonFinite { iteration: k, what: "F" });
        }

        wf = aligned_stack(models, &f_next);
        let gap = h.as_matrix() - wf.as_matrix();
        let next_dual = dual.as_matrix() + (1.0 / rho) * &gap;
        dual = FrameStack::from_matrix(next_dual);
        if !dual.is_finite() {
            return Err(Error::NonFinite { iteration: k, what: "Lambda" });
        }

        let misfit = data_misfit(models, g, &f_next);
        report
            .objective
            .push(lambda * nuclear_norm(wf.as_matrix()) + misfit);
        report
            .primal_residual
            .push(gap.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt());
        report.iterations = k;

        let prev_norm = f.frobenius_norm();
        let change = (f_next.as_matrix() - f.as_matrix())
            .as_slice()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        f = f_next;

        if per_iteration {
            let est = estimate_lambda(&f, g, models, fallback)?;
            report.lambda_fallback |= est.fallback_used;
            lambda = est.value;
        }

        let rel = if prev_norm > 0.0 { change / prev_norm } else if change == 0.0 { 0.0 } else { f64::INFINITY };
        if rel < cfg.rel_tol {
            report.converged = true;
            break;
        }
    }
    report.lambda = lambda;

    let hr = ImageGrid::new(geom.hr_height(), geom.hr_width(), fuse_columns(models, &f, &init))?;
    report.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(AdmmOutput { hr, f, report })
}
