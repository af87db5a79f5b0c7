//! End-to-end reconstruction: register, build frame operators, solve, report.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::Serialize;

use crate::color::{rgb_to_ycbcr, ycbcr_to_rgb, RgbGrid};
use crate::error::{Error, Result};
use crate::grid::{Displacement, GridGeometry, ImageGrid};
use crate::metrics::OverlapRegion;
use crate::ops::{FrameModel, WindowBounds};
use crate::registration::{
    gaussian_prefilter, identity_registration, register_frame, FlowField, FlowSummary, FrameRegistration, Interpolation,
    LapFilterBank, LmConfig,
};
use crate::solver::{admm_solve, upsample_init, FrameStack, SolveReport, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub r: usize,
    pub reference: usize,
    pub solver: SolverConfig,
    /// Dynamic range `d`; the output is clamped to `[0, d]`.
    pub range: f64,
    /// Frames with total displacement above `max_shift_fraction · min(m, n)` are excluded.
    pub max_shift_fraction: f64,
    pub lap_radius: usize,
    /// Gaussian blur applied to copies of the frames before registration.
    pub prefilter_sigma: f64,
    pub lm: LmConfig,
}

impl PipelineConfig {
    pub fn new(r: usize) -> Self {
        Self {
            r,
            reference: 0,
            solver: SolverConfig::default(),
            range: 255.0,
            max_shift_fraction: 0.25,
            lap_radius: 16,
            prefilter_sigma: 1.0,
            lm: LmConfig {
                margin: 4,
                interpolation: Interpolation::Fourier,
                ..LmConfig::default()
            },
        }
    }
}

/// One row of the registration table, in input order.
#[derive(Debug, Clone, Serialize)]
pub struct FrameReport {
    pub frame: usize,
    pub reference: bool,
    pub excluded: bool,
    pub flow: FlowSummary,
    /// Residual translation of the restored frame.
    pub s_x: f64,
    pub s_y: f64,
    /// Total displacement `t` with `g(x) ≈ g_ref(x + t)`, LR pixels.
    pub total_x: f64,
    pub total_y: f64,
    pub l_x: i64,
    pub l_y: i64,
    pub eps_x: f64,
    pub eps_y: f64,
    pub lm_iterations: usize,
    pub lm_converged: bool,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub hr: ImageGrid,
    pub frames: Vec<FrameReport>,
    pub solver: SolveReport,
    /// HR region seen by every used frame.
    pub overlap: OverlapRegion,
    pub warnings: Vec<String>,
    /// Dense LAP flow per input frame; empty when displacements were supplied.
    pub flows: Vec<FlowField>,
}

/// Reference first, then the other frames in a content-defined order.
///
/// Makes the result independent of how the non-reference frames are listed.
fn canonical_order(frames: &[ImageGrid], reference: usize) -> Vec<usize> {
    let mut rest: Vec<usize> = (0..frames.len()).filter(|&i| i != reference).collect();
    rest.sort_by(|&a, &b| {
        let (fa, fb) = (frames[a].as_slice(), frames[b].as_slice());
        fa.iter()
            .zip(fb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut order = vec![reference];
    order.extend(rest);
    order
}

fn check_frames(frames: &[ImageGrid], cfg: &PipelineConfig) -> Result<GridGeometry> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidInput("no input frames".into()))?;
    if cfg.reference >= frames.len() {
        return Err(Error::InvalidInput(format!(
            "reference index {} out of range for {} frames",
            cfg.reference,
            frames.len()
        )));
    }
    if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| !f.same_shape(first)) {
        return Err(Error::InvalidInput(format!(
            "frame {i} is {}x{}, expected {}x{}",
            f.height(),
            f.width(),
            first.height(),
            first.width()
        )));
    }
    if !(cfg.range > 0.0) {
        return Err(Error::InvalidInput("dynamic range must be > 0".into()));
    }
    cfg.solver.validate()?;
    GridGeometry::new(first.height(), first.width(), cfg.r, frames.len())
}

/// Registers every frame against `frames[reference]`; the reference gets the identity.
pub fn register_frames(frames: &[ImageGrid], cfg: &PipelineConfig) -> Result<(Vec<FrameRegistration>, Vec<String>)> {
    let geom = check_frames(frames, cfg)?;
    let mut warnings = Vec::new();
    let max_radius = (geom.m.min(geom.n) - 1) / 2;
    let radius = cfg.lap_radius.min(max_radius).max(1);
    if radius < cfg.lap_radius {
        warnings.push(format!(
            "frames are {}x{}; LAP radius reduced from {} to {radius}",
            geom.m, geom.n, cfg.lap_radius
        ));
    }
    let bank = LapFilterBank::new(radius)?;
    let smooth: Vec<ImageGrid> = frames
        .par_iter()
        .map(|f| gaussian_prefilter(f, cfg.prefilter_sigma))
        .collect();
    let reference = &smooth[cfg.reference];
    let regs = smooth
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            if i == cfg.reference {
                Ok(identity_registration(reference))
            } else {
                register_frame(f, reference, &bank, &cfg.lm)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((regs, warnings))
}

/// Full pipeline: registration followed by [`reconstruct_with_displacements`].
pub fn reconstruct(frames: &[ImageGrid], cfg: &PipelineConfig) -> Result<Reconstruction> {
    let (regs, warnings) = register_frames(frames, cfg)?;
    let totals: Vec<(f64, f64)> = regs.iter().map(|r| (r.total_x, r.total_y)).collect();
    let mut out = reconstruct_with_displacements(frames, &totals, cfg)?;
    for (row, reg) in out.frames.iter_mut().zip(&regs) {
        row.flow = reg.flow.summary();
        row.s_x = reg.translation.s_x;
        row.s_y = reg.translation.s_y;
        row.lm_iterations = reg.translation.iterations;
        row.lm_converged = reg.translation.converged;
    }
    let mut all = warnings;
    all.append(&mut out.warnings);
    out.warnings = all;
    out.flows = regs.into_iter().map(|r| r.flow).collect();
    Ok(out)
}

struct Prepared {
    geom: GridGeometry,
    used: Vec<usize>,
    models: Vec<FrameModel>,
    rows: Vec<FrameReport>,
    overlap: OverlapRegion,
    warnings: Vec<String>,
}

fn prepare(frames: &[ImageGrid], totals: &[(f64, f64)], cfg: &PipelineConfig) -> Result<Prepared> {
    let geom = check_frames(frames, cfg)?;
    if totals.len() != frames.len() {
        return Err(Error::InvalidInput(format!(
            "{} displacements for {} frames",
            totals.len(),
            frames.len()
        )));
    }
    let bound = cfg.max_shift_fraction * geom.m.min(geom.n) as f64;
    let mut warnings = Vec::new();
    let mut rows = Vec::with_capacity(frames.len());
    let mut disps = Vec::with_capacity(frames.len());
    for (i, &(tx, ty)) in totals.iter().enumerate() {
        let (tx, ty) = if i == cfg.reference { (0.0, 0.0) } else { (tx, ty) };
        let d = Displacement::new(tx, ty, cfg.r)?;
        let excluded = i != cfg.reference && tx.hypot(ty) > bound;
        if excluded {
            warnings.push(format!(
                "frame {i} excluded: displacement ({tx:.3}, {ty:.3}) exceeds {bound:.3} LR pixels"
            ));
        }
        rows.push(FrameReport {
            frame: i,
            reference: i == cfg.reference,
            excluded,
            flow: FlowSummary {
                mean_u: 0.0,
                mean_v: 0.0,
                integer_u: 0,
                integer_v: 0,
                valid_fraction: 1.0,
            },
            s_x: tx,
            s_y: ty,
            total_x: tx,
            total_y: ty,
            l_x: d.l_x,
            l_y: d.l_y,
            eps_x: d.eps_x,
            eps_y: d.eps_y,
            lm_iterations: 0,
            lm_converged: true,
        });
        disps.push(d);
    }
    let used: Vec<usize> = canonical_order(frames, cfg.reference)
        .into_iter()
        .filter(|&i| !rows[i].excluded)
        .collect();
    if frames.len() >= 2 && used.len() < 2 {
        return Err(Error::Registration(format!(
            "only {} of {} frames passed the displacement sanity bound",
            used.len(),
            frames.len()
        )));
    }
    let geom = GridGeometry::new(geom.m, geom.n, geom.r, used.len())?;
    let bounds = WindowBounds::from_displacements(used.iter().map(|&i| &disps[i]));
    let models = used
        .iter()
        .map(|&i| FrameModel::new(geom, disps[i], bounds))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Registration(format!("frames share no common region: {e}")))?;
    let overlap = OverlapRegion::from_integer_shifts(
        geom.hr_height(),
        geom.hr_width(),
        used.iter().map(|&i| (disps[i].l_x, disps[i].l_y)),
    )?;
    Ok(Prepared {
        geom,
        used,
        models,
        rows,
        overlap,
        warnings,
    })
}

fn solve_plane(frames: &[ImageGrid], prep: &Prepared, cfg: &PipelineConfig) -> Result<(ImageGrid, SolveReport)> {
    let g: Vec<Vec<f64>> = prep.used.iter().map(|&i| frames[i].as_slice().to_vec()).collect();
    let f0 = upsample_init(prep.geom, &g)?;
    let dual0 = FrameStack::zeros(prep.geom.hr_len(), prep.used.len());
    let out = admm_solve(&g, &prep.models, &cfg.solver, f0, dual0)?;
    Ok((out.hr, out.report))
}

/// Reconstruction from known total displacements (`totals[i]`, LR pixels, `g_i(x) ≈ g_ref(x + t_i)`).
pub fn reconstruct_with_displacements(
    frames: &[ImageGrid],
    totals: &[(f64, f64)],
    cfg: &PipelineConfig,
) -> Result<Reconstruction> {
    let prep = prepare(frames, totals, cfg)?;
    let (hr, solver) = solve_plane(frames, &prep, cfg)?;
    let mut warnings = prep.warnings;
    warnings.extend(solver.warnings.iter().cloned());
    Ok(Reconstruction {
        hr: hr.clamped(0.0, cfg.range),
        frames: prep.rows,
        solver,
        overlap: prep.overlap,
        warnings,
        flows: Vec::new(),
    })
}

#[derive(Debug, Clone)]
pub struct ColorReconstruction {
    pub rgb: RgbGrid,
    pub frames: Vec<FrameReport>,
    /// Solver reports for Y, Cb, Cr.
    pub solver: Vec<SolveReport>,
    pub overlap: OverlapRegion,
    pub warnings: Vec<String>,
    pub flows: Vec<FlowField>,
}

/// Per-channel reconstruction in YCbCr with registration shared from luminance.
pub fn reconstruct_color(frames: &[RgbGrid], cfg: &PipelineConfig) -> Result<ColorReconstruction> {
    let planes: Vec<[ImageGrid; 3]> = frames.iter().map(rgb_to_ycbcr).collect();
    let luma: Vec<ImageGrid> = planes.iter().map(|p| p[0].clone()).collect();
    let (regs, mut warnings) = register_frames(&luma, cfg)?;
    let totals: Vec<(f64, f64)> = regs.iter().map(|r| (r.total_x, r.total_y)).collect();
    let prep = prepare(&luma, &totals, cfg)?;
    warnings.extend(prep.warnings.iter().cloned());

    let mut out_planes = Vec::with_capacity(3);
    let mut reports = Vec::with_capacity(3);
    for c in 0..3 {
        let channel: Vec<ImageGrid> = planes.iter().map(|p| p[c].clone()).collect();
        let (hr, rep) = solve_plane(&channel, &prep, cfg)?;
        warnings.extend(rep.warnings.iter().map(|w| format!("channel {c}: {w}")));
        out_planes.push(hr);
        reports.push(rep);
    }
    let ycc: [ImageGrid; 3] = out_planes.try_into().expect("three planes");
    let rgb = ycbcr_to_rgb(&ycc)?.clamped(0.0, cfg.range);

    let mut rows = prep.rows;
    for (row, reg) in rows.iter_mut().zip(&regs) {
        row.flow = reg.flow.summary();
        row.s_x = reg.translation.s_x;
        row.s_y = reg.translation.s_y;
        row.lm_iterations = reg.translation.iterations;
        row.lm_converged = reg.translation.converged;
    }
    Ok(ColorReconstruction {
        rgb,
        frames: rows,
        solver: reports,
        overlap: prep.overlap,
        warnings,
        flows: regs.into_iter().map(|r| r.flow).collect(),
    })
}
