//! Synthetic LR sequences with known motion, illumination and noise.
//!
//! Each frame is `α · D K warp(f) + n` where `warp(f)(X) = f(R_θ(X − c) + c + r·t)`
//! is evaluated by periodic bilinear interpolation on the HR grid. For a pure
//! translation this is exactly `D K C_i B_i f` with `s = t`, so the generated
//! frames satisfy `g(x) ≈ g_0(x + t)` in LR pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::RgbGrid;
use crate::error::{Error, Result};
use crate::grid::{GridGeometry, ImageGrid};
use crate::ops::{build_blur, build_downsampler};

/// Motion of one frame. `theta` is in degrees, counter-clockwise about the image center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub sx: f64,
    pub sy: f64,
    pub theta: f64,
    pub alpha: f64,
}

impl Motion {
    pub fn identity() -> Self {
        Self {
            sx: 0.0,
            sy: 0.0,
            theta: 0.0,
            alpha: 1.0,
        }
    }

    pub fn translation(sx: f64, sy: f64) -> Self {
        Self {
            sx,
            sy,
            ..Self::identity()
        }
    }
}

/// One entry of the `motions.json` sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionRecord {
    pub frame: usize,
    pub sx: f64,
    pub sy: f64,
    pub theta: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub r: usize,
    pub noise_ratio: f64,
    pub seed: u64,
    /// Dynamic range `d`; the noise standard deviation is `noise_ratio · d`.
    pub range: f64,
}

impl SynthConfig {
    pub fn new(r: usize, noise_ratio: f64, seed: u64) -> Self {
        Self {
            r,
            noise_ratio,
            seed,
            range: 255.0,
        }
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_ratio * self.range
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub frames: Vec<ImageGrid>,
    pub motions: Vec<MotionRecord>,
}

#[derive(Debug, Clone)]
pub struct SyntheticColorSequence {
    pub frames: Vec<RgbGrid>,
    pub motions: Vec<MotionRecord>,
}

fn validate(hr: &ImageGrid, motions: &[Motion], cfg: &SynthConfig) -> Result<GridGeometry> {
    if cfg.r == 0 || hr.height() % cfg.r != 0 || hr.width() % cfg.r != 0 {
        return Err(Error::InvalidInput(format!(
            "HR size {}x{} is not divisible by factor {}",
            hr.height(),
            hr.width(),
            cfg.r
        )));
    }
    if motions.is_empty() {
        return Err(Error::InvalidInput("at least one motion is required".into()));
    }
    if !(cfg.noise_ratio >= 0.0 && cfg.noise_ratio.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "noise ratio {} must be finite and >= 0",
            cfg.noise_ratio
        )));
    }
    if let Some(m) = motions
        .iter()
        .find(|m| ![m.sx, m.sy, m.theta, m.alpha].iter().all(|v| v.is_finite()))
    {
        return Err(Error::InvalidInput(format!("non-finite motion {m:?}")));
    }
    GridGeometry::new(hr.height() / cfg.r, hr.width() / cfg.r, cfg.r, motions.len())
}

/// Geometric warp on the HR grid, periodic at the borders.
pub fn warp(hr: &ImageGrid, motion: &Motion, r: usize) -> ImageGrid {
    let (cy, cx) = ((hr.height() as f64 - 1.0) / 2.0, (hr.width() as f64 - 1.0) / 2.0);
    let (sin, cos) = motion.theta.to_radians().sin_cos();
    let (ty, tx) = (r as f64 * motion.sy, r as f64 * motion.sx);
    ImageGrid::from_fn(hr.height(), hr.width(), |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let (ry, rx) = if motion.theta == 0.0 {
            (dy, dx)
        } else {
            (sin * dx + cos * dy, cos * dx - sin * dy)
        };
        hr.sample_bilinear_periodic(ry + cy + ty, rx + cx + tx)
    })
}

/// `α · D K warp(f)` without noise.
pub fn clean_frame(hr: &ImageGrid, motion: &Motion, geom: GridGeometry) -> Result<ImageGrid> {
    let warped = warp(hr, motion, geom.r);
    let blurred = build_blur(geom).apply(warped.as_slice())?;
    let lr = build_downsampler(geom).apply(&blurred)?;
    Ok(ImageGrid::new(geom.m, geom.n, lr)?.scaled(motion.alpha))
}

fn noise_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn add_noise(img: &mut ImageGrid, sigma: f64, seed: u64, stream: u64) {
    if sigma == 0.0 {
        return;
    }
    let mut rng = noise_rng(seed, stream);
    for v in img.as_mut_slice() {
        let z: f64 = rng.sample(StandardNormal);
        *v += sigma * z;
    }
}

fn records(motions: &[Motion]) -> Vec<MotionRecord> {
    motions
        .iter()
        .enumerate()
        .map(|(frame, m)| MotionRecord {
            frame,
            sx: m.sx,
            sy: m.sy,
            theta: m.theta,
            alpha: m.alpha,
        })
        .collect()
}

/// Generates one noisy LR frame per motion. Frame `i` draws its noise from stream `4i` of `seed`.
pub fn synthesize_sequence(hr: &ImageGrid, motions: &[Motion], cfg: &SynthConfig) -> Result<SyntheticSequence> {
    let geom = validate(hr, motions, cfg)?;
    let frames = motions
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let mut f = clean_frame(hr, m, geom)?;
            add_noise(&mut f, cfg.noise_sigma(), cfg.seed, 4 * i as u64);
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticSequence {
        frames,
        motions: records(motions),
    })
}

/// Color variant: the same motion for all channels, independent noise per channel.
pub fn synthesize_color_sequence(
    hr: &RgbGrid,
    motions: &[Motion],
    cfg: &SynthConfig,
) -> Result<SyntheticColorSequence> {
    let geom = validate(&hr.channels[0], motions, cfg)?;
    let frames = motions
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let mut ch = Vec::with_capacity(3);
            for (c, plane) in hr.channels.iter().enumerate() {
                let mut f = clean_frame(plane, m, geom)?;
                add_noise(&mut f, cfg.noise_sigma(), cfg.seed, 4 * i as u64 + c as u64);
                ch.push(f);
            }
            let [r, g, b]: [ImageGrid; 3] = ch.try_into().expect("three channels");
            RgbGrid::new(r, g, b)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticColorSequence {
        frames,
        motions: records(motions),
    })
}

/// Parameters for [`random_motions`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionRanges {
    /// Translations are drawn from `[−max_shift, max_shift]` LR pixels.
    pub max_shift: f64,
    /// Rotations are drawn from `[−max_rotation, max_rotation]` degrees.
    pub max_rotation: f64,
    /// Illumination scales are drawn from `[1 − alpha_spread, 1 + alpha_spread]`.
    pub alpha_spread: f64,
}

impl Default for MotionRanges {
    fn default() -> Self {
        Self {
            max_shift: 1.5,
            max_rotation: 0.0,
            alpha_spread: 0.0,
        }
    }
}

/// Frame 0 is the identity; the rest are uniform draws.
///
/// Translation components within 0.15 of a nonzero integer are redrawn: the
/// integer part of the flow is unstable there, so such shifts make poor test data.
pub fn random_motions(p: usize, ranges: &MotionRanges, seed: u64) -> Vec<Motion> {
    let mut rng = noise_rng(seed, u64::MAX);
    let near_integer = |v: f64| v.abs() >= 0.85 && (v.abs() - v.abs().round()).abs() < 0.15;
    let draw = |rng: &mut ChaCha20Rng, half: f64| {
        if half <= 0.0 {
            return 0.0;
        }
        loop {
            let v = rng.random_range(-half..=half);
            if !near_integer(v) {
                return v;
            }
        }
    };
    let mut out = vec![Motion::identity()];
    for _ in 1..p {
        let sx = draw(&mut rng, ranges.max_shift);
        let sy = draw(&mut rng, ranges.max_shift);
        let theta = if ranges.max_rotation > 0.0 {
            rng.random_range(-ranges.max_rotation..=ranges.max_rotation)
        } else {
            0.0
        };
        let alpha = if ranges.alpha_spread > 0.0 {
            rng.random_range(1.0 - ranges.alpha_spread..=1.0 + ranges.alpha_spread)
        } else {
            1.0
        };
        out.push(Motion { sx, sy, theta, alpha });
    }
    out.truncate(p);
    out
}

/// Procedural periodic HR test image with values in `[20, 235]`.
///
/// A broadband sum of sinusoids carries texture; soft-edged disks and bars add
/// the sharp structure that super-resolution can recover.
pub fn test_pattern(height: usize, width: usize, seed: u64) -> ImageGrid {
    use std::f64::consts::TAU;
    let mut rng = noise_rng(seed, u64::MAX - 1);
    let (hf, wf) = (height as f64, width as f64);

    // Integer wave vectors keep the pattern periodic.
    let kmax = 0.3 * hf.min(wf);
    let waves: Vec<(f64, f64, f64, f64)> = (0..96)
        .map(|_| {
            let radius = rng.random_range(1.0..kmax);
            let angle = rng.random_range(0.0..TAU);
            let a = (radius * angle.cos()).round();
            let b = (radius * angle.sin()).round();
            let k = a.hypot(b).max(1.0);
            (a, b, k.powf(-0.7), rng.random_range(0.0..TAU))
        })
        .collect();
    let disks: Vec<(f64, f64, f64, f64)> = (0..16)
        .map(|_| {
            (
                rng.random_range(0.0..hf),
                rng.random_range(0.0..wf),
                rng.random_range(0.03..0.12) * hf.min(wf),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let bars: Vec<(f64, f64, f64)> = (0..5)
        .map(|_| (rng.random_range(0.0..wf), rng.random_range(1.5..5.0), rng.random_range(-1.0..1.0)))
        .collect();

    let torus = |d: f64, period: f64| {
        let d = d.rem_euclid(period);
        d.min(period - d)
    };
    let soft = |dist: f64| 1.0 / (1.0 + (dist / 0.75).exp());

    let raw = ImageGrid::from_fn(height, width, |y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = 0.0;
        for &(a, b, amp, ph) in &waves {
            v += amp * (TAU * (a * yf / hf + b * xf / wf) + ph).sin();
        }
        for &(cy, cx, rad, c) in &disks {
            let d = torus(yf - cy, hf).hypot(torus(xf - cx, wf));
            v += 1.5 * c * soft(d - rad);
        }
        for &(cx, half, c) in &bars {
            v += 1.2 * c * soft(torus(xf - cx, wf) - half);
        }
        v
    });
    let (lo, hi) = raw
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    raw.map(|v| 20.0 + 215.0 * (v - lo) / span)
}

/// Color test image: three decorrelated patterns mixed towards a shared luminance.
pub fn test_pattern_color(height: usize, width: usize, seed: u64) -> RgbGrid {
    let base = test_pattern(height, width, seed);
    let tint: Vec<ImageGrid> = (1..=3).map(|k| test_pattern(height, width, seed.wrapping_add(k))).collect();
    let mix = |t: &ImageGrid| {
        let data = base.as_slice().iter().zip(t.as_slice()).map(|(b, c)| 0.7 * b + 0.3 * c).collect();
        ImageGrid::new(height, width, data).expect("same shape")
    };
    RgbGrid {
        channels: [mix(&tint[0]), mix(&tint[1]), mix(&tint[2])],
    }
}

/// Linear remap of `img` so that its extremes become `lo` and `hi`.
pub fn rescale(img: &ImageGrid, lo: f64, hi: f64) -> ImageGrid {
    let (a, b) = img
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if b > a { b - a } else { 1.0 };
    img.map(|v| lo + (hi - lo) * (v - a) / span)
}

/// A self-describing synthetic experiment.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub hr: ImageGrid,
    pub motions: Vec<Motion>,
    pub config: SynthConfig,
}

impl Scenario {
    pub fn generate(&self) -> Result<SyntheticSequence> {
        synthesize_sequence(&self.hr, &self.motions, &self.config)
    }

    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new(
            self.hr.height() / self.config.r,
            self.hr.width() / self.config.r,
            self.config.r,
            self.motions.len(),
        )
    }
}

/// 17 frames, 5% noise, `r = 2`, 128×128 LR, translations up to 1.5 LR pixels.
///
/// Contrast is moderate (intensities 50–200) so that noise is visible to the
/// global SSIM, as in real video frames.
pub fn noisy_translation_scenario() -> Scenario {
    Scenario {
        name: "noisy-translation",
        hr: rescale(&test_pattern(256, 256, 2024), 50.0, 200.0),
        motions: random_motions(17, &MotionRanges::default(), 2024),
        config: SynthConfig::new(2, 0.05, 2024),
    }
}

/// 5 noiseless frames, `r = 2`, 64×64 LR, exact sub-pixel translations.
pub fn exact_translation_scenario() -> Scenario {
    Scenario {
        name: "exact-translation",
        hr: test_pattern(128, 128, 7),
        motions: vec![
            Motion::identity(),
            Motion::translation(0.5, 0.0),
            Motion::translation(0.0, 0.5),
            Motion::translation(0.5, 0.5),
            Motion::translation(-0.25, 0.75),
        ],
        config: SynthConfig::new(2, 0.0, 7),
    }
}

/// Small rotations and illumination changes on top of translations.
pub fn rotation_illumination_scenario() -> Scenario {
    let ranges = MotionRanges {
        max_shift: 1.5,
        max_rotation: 1.0,
        alpha_spread: 0.05,
    };
    Scenario {
        name: "rotation-illumination",
        hr: rescale(&test_pattern(192, 192, 99), 40.0, 210.0),
        motions: random_motions(9, &ranges, 99),
        config: SynthConfig::new(2, 0.02, 99),
    }
}

pub fn bundled_scenarios() -> Vec<Scenario> {
    vec![
        exact_translation_scenario(),
        noisy_translation_scenario(),
        rotation_illumination_scenario(),
    ]
}
