//! Command-line front end: `synth`, `fuse`, `metrics`, `pattern`.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::color::RgbGrid;
use crate::error::Error;
use crate::grid::ImageGrid;
use crate::io::{list_frames, read_gray, read_rgb, write_gray, write_rgb};
use crate::metrics::{evaluate, OverlapRegion, QualityReport};
use crate::pipeline::{reconstruct, reconstruct_color, FrameReport, PipelineConfig};
use crate::registration::{FlowField, Interpolation};
use crate::solver::{LambdaRule, MultiplierScaling};
use crate::synth::{
    bundled_scenarios, random_motions, rescale, synthesize_color_sequence, synthesize_sequence, test_pattern,
    test_pattern_color, MotionRanges, MotionRecord, SynthConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

/// Version of the `report.json` layout.
pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "mfsr", version, about = "Multi-frame super-resolution with a low-rank model")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate LR frames from an HR image with known motions.
    Synth(SynthArgs),
    /// Register and fuse LR frames into one HR image.
    Fuse(FuseArgs),
    /// PSNR and SSIM of two images.
    Metrics(MetricsArgs),
    /// Write the procedural test image.
    Pattern(PatternArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FrameFormat {
    Pgm,
    Png,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["input", "scenario"])))]
struct SynthArgs {
    /// Ground-truth HR image.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Bundled scenario name instead of --input (frames, motions and noise come from the scenario).
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, default_value_t = 17)]
    frames: usize,
    #[arg(long, default_value_t = 2)]
    factor: usize,
    /// Noise standard deviation as a fraction of the dynamic range.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Largest translation, LR pixels.
    #[arg(long, default_value_t = 1.5)]
    max_shift: f64,
    /// Largest rotation, degrees.
    #[arg(long, default_value_t = 0.0)]
    max_rotation: f64,
    /// Illumination scales are drawn from [1 − s, 1 + s].
    #[arg(long, default_value_t = 0.0)]
    alpha_spread: f64,
    #[arg(long, value_enum, default_value_t = FrameFormat::Pgm)]
    format: FrameFormat,
    /// Read the input as RGB and write color frames.
    #[arg(long)]
    color: bool,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the scenario's ground-truth HR image.
    #[arg(long, requires = "scenario")]
    truth_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Multiplier {
    Scaled,
    Unscaled,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Interp {
    Fourier,
    Bilinear,
}

#[derive(Debug, Args)]
struct FuseArgs {
    /// A directory of frames or an explicit list of files.
    #[arg(long, num_args = 1.., required = true)]
    frames: Vec<PathBuf>,
    #[arg(long = "ref", default_value_t = 0)]
    reference: usize,
    #[arg(long, default_value_t = 2)]
    factor: usize,
    /// Regularization weight, or "auto".
    #[arg(long, default_value = "auto")]
    lambda: String,
    #[arg(long, default_value_t = 400.0)]
    rho: f64,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, value_enum, default_value_t = Multiplier::Scaled)]
    multiplier: Multiplier,
    /// Gaussian prefilter for registration, LR pixels.
    #[arg(long, default_value_t = 1.0)]
    prefilter: f64,
    #[arg(long, value_enum, default_value_t = Interp::Fourier)]
    interp: Interp,
    #[arg(long, default_value_t = 255.0)]
    range: f64,
    #[arg(long)]
    color: bool,
    #[arg(long)]
    out: PathBuf,
    /// Report path (default: report.json next to --out).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Ground-truth HR image; adds PSNR/SSIM of the result and of bilinear upsampling.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Directory for per-frame flow fields as text matrices.
    #[arg(long)]
    dump_flow: Option<PathBuf>,
    /// Record wall time as 0 so reports are byte-comparable.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Reconstruction.
    a: PathBuf,
    /// Reference.
    b: PathBuf,
    /// Inclusive region x0,y0,x1,y1.
    #[arg(long)]
    overlap: Option<String>,
    #[arg(long, default_value_t = 255.0)]
    range: f64,
}

#[derive(Debug, Args)]
struct PatternArgs {
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20.0)]
    low: f64,
    #[arg(long, default_value_t = 235.0)]
    high: f64,
    #[arg(long)]
    color: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_) => Self::usage(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.threads {
        Some(0) => Err(CliError::usage("--threads must be >= 1")),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command)),
            Err(e) => Err(CliError::data(format!("thread pool: {e}"))),
        },
        None => dispatch(cli.command),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("mfsr: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Pattern(a) => cmd_pattern(a),
    }
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn finite_or_text(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("nan")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

/// `QualityReport` as JSON with an infinite PSNR spelled `"inf"`.
pub fn quality_json(q: &QualityReport) -> Value {
    json!({
        "psnr_db": finite_or_text(q.psnr_db),
        "ssim": q.ssim,
        "region": q.region,
    })
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let ext = match a.format {
        FrameFormat::Pgm if a.color => "ppm",
        FrameFormat::Pgm => "pgm",
        FrameFormat::Png => "png",
    };
    let frame_path = |i: usize| a.out.join(format!("frame_{i:03}.{ext}"));

    let (records, cfg, source) = if let Some(name) = &a.scenario {
        let sc = bundled_scenarios()
            .into_iter()
            .find(|s| s.name == name)
            .ok_or_else(|| {
                let names: Vec<&str> = bundled_scenarios().iter().map(|s| s.name).collect();
                CliError::usage(format!("unknown scenario {name:?}; available: {}", names.join(", ")))
            })?;
        let seq = sc.generate()?;
        for (i, f) in seq.frames.iter().enumerate() {
            write_gray(&frame_path(i), f)?;
        }
        if let Some(path) = &a.truth_out {
            write_gray(path, &sc.hr)?;
        }
        (seq.motions, sc.config, json!({ "scenario": sc.name }))
    } else {
        let input = a.input.as_ref().expect("clap enforces the source group");
        let cfg = SynthConfig::new(a.factor, a.noise, a.seed);
        let ranges = MotionRanges {
            max_shift: a.max_shift,
            max_rotation: a.max_rotation,
            alpha_spread: a.alpha_spread,
        };
        if a.frames == 0 {
            return Err(CliError::usage("--frames must be >= 1"));
        }
        let motions = random_motions(a.frames, &ranges, a.seed);
        let records = if a.color {
            let seq = synthesize_color_sequence(&read_rgb(input)?, &motions, &cfg)?;
            for (i, f) in seq.frames.iter().enumerate() {
                write_rgb(&frame_path(i), f)?;
            }
            seq.motions
        } else {
            let seq = synthesize_sequence(&read_gray(input)?, &motions, &cfg)?;
            for (i, f) in seq.frames.iter().enumerate() {
                write_gray(&frame_path(i), f)?;
            }
            seq.motions
        };
        (records, cfg, json!({ "input": input.display().to_string() }))
    };

    write_json(&a.out.join("motions.json"), &serde_json::to_value(&records).map_err(Error::from)?)?;
    let meta = json!({
        "schema": REPORT_SCHEMA,
        "source": source,
        "frames": records.len(),
        "factor": cfg.r,
        "noise_ratio": cfg.noise_ratio,
        "noise_sigma": cfg.noise_sigma(),
        "range": cfg.range,
        "seed": cfg.seed,
    });
    write_json(&a.out.join("synth.json"), &meta)
}

fn frame_list(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let files = match inputs {
        [one] if one.is_dir() => list_frames(one)?,
        _ => inputs.to_vec(),
    };
    if files.is_empty() {
        return Err(CliError::data("no input frames found"));
    }
    Ok(files)
}

fn check_sizes<T>(files: &[PathBuf], frames: &[T], dims: impl Fn(&T) -> (usize, usize)) -> CliResult<()> {
    let first = dims(&frames[0]);
    for (path, f) in files.iter().zip(frames) {
        let d = dims(f);
        if d != first {
            return Err(CliError::data(format!(
                "{}: size {}x{} differs from {} ({}x{})",
                path.display(),
                d.0,
                d.1,
                files[0].display(),
                first.0,
                first.1
            )));
        }
    }
    Ok(())
}

fn pipeline_config(a: &FuseArgs) -> CliResult<PipelineConfig> {
    let mut cfg = PipelineConfig::new(a.factor);
    cfg.reference = a.reference;
    cfg.range = a.range;
    cfg.prefilter_sigma = a.prefilter;
    cfg.lm.interpolation = match a.interp {
        Interp::Fourier => Interpolation::Fourier,
        Interp::Bilinear => Interpolation::Bilinear,
    };
    cfg.solver.rho = a.rho;
    cfg.solver.max_iters = a.iters;
    cfg.solver.rel_tol = a.tol;
    cfg.solver.multiplier = match a.multiplier {
        Multiplier::Scaled => MultiplierScaling::Scaled,
        Multiplier::Unscaled => MultiplierScaling::Unscaled,
    };
    if a.lambda != "auto" {
        let l: f64 = a
            .lambda
            .parse()
            .map_err(|_| CliError::usage(format!("--lambda must be a number or \"auto\", got {:?}", a.lambda)))?;
        cfg.solver.lambda = LambdaRule::Fixed(l);
    }
    cfg.solver.validate()?;
    if a.factor == 0 {
        return Err(CliError::usage("--factor must be >= 1"));
    }
    Ok(cfg)
}

fn dump_flows(dir: &Path, flows: &[FlowField]) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    for (i, flow) in flows.iter().enumerate() {
        let (u, v) = flow.to_text();
        for (suffix, text) in [("u", u), ("v", v)] {
            let path = dir.join(format!("flow_{i:03}_{suffix}.txt"));
            std::fs::write(&path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(())
}

fn metrics_pair(result: &[&ImageGrid], bilinear: &[&ImageGrid], truth: &[&ImageGrid], range: f64, overlap: OverlapRegion) -> CliResult<Value> {
    let mut out = serde_json::Map::new();
    for (name, imgs) in [("nuclear", result), ("bilinear", bilinear)] {
        let per: Vec<Value> = imgs
            .iter()
            .zip(truth)
            .map(|(x, t)| evaluate(x, t, range, overlap).map(|q| quality_json(&q)))
            .collect::<crate::Result<_>>()?;
        out.insert(name.into(), if per.len() == 1 { per[0].clone() } else { Value::Array(per) });
    }
    Ok(Value::Object(out))
}

fn cmd_fuse(a: FuseArgs) -> CliResult<()> {
    let cfg = pipeline_config(&a)?;
    let files = frame_list(&a.frames)?;
    if a.reference >= files.len() {
        return Err(CliError::usage(format!(
            "--ref {} out of range for {} frames",
            a.reference,
            files.len()
        )));
    }
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| a.out.parent().unwrap_or(Path::new("")).join("report.json"));

    let (rows, solver, overlap, warnings, metrics) = if a.color {
        let frames: Vec<RgbGrid> = files.iter().map(|p| read_rgb(p)).collect::<crate::Result<_>>()?;
        check_sizes(&files, &frames, |f| (f.height(), f.width()))?;
        let mut out = reconstruct_color(&frames, &cfg)?;
        if a.no_timing {
            out.solver.iter_mut().for_each(|s| s.wall_ms = 0.0);
        }
        write_rgb(&a.out, &out.rgb)?;
        if let Some(dir) = &a.dump_flow {
            dump_flows(dir, &out.flows)?;
        }
        let metrics = match &a.truth {
            Some(t) => {
                let truth = read_rgb(t)?;
                let base = frames[a.reference].channels.clone().map(|c| c.upsample_bilinear(a.factor));
                let res: Vec<&ImageGrid> = out.rgb.channels.iter().collect();
                let bil: Vec<&ImageGrid> = base.iter().collect();
                let tru: Vec<&ImageGrid> = truth.channels.iter().collect();
                Some(metrics_pair(&res, &bil, &tru, a.range, out.overlap)?)
            }
            None => None,
        };
        (out.frames, json!(out.solver), out.overlap, out.warnings, metrics)
    } else {
        let frames: Vec<ImageGrid> = files.iter().map(|p| read_gray(p)).collect::<crate::Result<_>>()?;
        check_sizes(&files, &frames, |f| (f.height(), f.width()))?;
        let mut out = reconstruct(&frames, &cfg)?;
        if a.no_timing {
            out.solver.wall_ms = 0.0;
        }
        write_gray(&a.out, &out.hr)?;
        if let Some(dir) = &a.dump_flow {
            dump_flows(dir, &out.flows)?;
        }
        let metrics = match &a.truth {
            Some(t) => {
                let truth = read_gray(t)?;
                let base = frames[a.reference].upsample_bilinear(a.factor);
                Some(metrics_pair(&[&out.hr], &[&base], &[&truth], a.range, out.overlap)?)
            }
            None => None,
        };
        (out.frames, json!(out.solver), out.overlap, out.warnings, metrics)
    };

    for w in &warnings {
        eprintln!("mfsr: warning: {w}");
    }
    let report = fuse_report(&a, &cfg, &files, &rows, solver, overlap, &warnings, metrics);
    write_json(&report_path, &report)
}

#[allow(clippy::too_many_arguments)]
fn fuse_report(
    a: &FuseArgs,
    cfg: &PipelineConfig,
    files: &[PathBuf],
    rows: &[FrameReport],
    solver: Value,
    overlap: OverlapRegion,
    warnings: &[String],
    metrics: Option<Value>,
) -> Value {
    let mut report = json!({
        "schema": REPORT_SCHEMA,
        "inputs": files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "output": a.out.display().to_string(),
        "reference": cfg.reference,
        "factor": cfg.r,
        "color": a.color,
        "config": {
            "solver": cfg.solver,
            "range": cfg.range,
            "max_shift_fraction": cfg.max_shift_fraction,
            "lap_radius": cfg.lap_radius,
            "prefilter_sigma": cfg.prefilter_sigma,
            "lm": cfg.lm,
        },
        "registration": rows,
        "solver": solver,
        "overlap": overlap,
        "warnings": warnings,
    });
    if let Some(m) = metrics {
        report["metrics"] = m;
    }
    report
}

fn parse_overlap(text: &str) -> CliResult<OverlapRegion> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::usage(format!("--overlap expects x0,y0,x1,y1, got {text:?}")))?;
    match parts[..] {
        [x0, y0, x1, y1] => Ok(OverlapRegion::new(x0, y0, x1, y1)?),
        _ => Err(CliError::usage(format!("--overlap expects x0,y0,x1,y1, got {text:?}"))),
    }
}

fn cmd_metrics(a: MetricsArgs) -> CliResult<()> {
    let x = read_gray(&a.a)?;
    let y = read_gray(&a.b)?;
    if !x.same_shape(&y) {
        return Err(CliError::data(format!(
            "{} is {}x{} but {} is {}x{}",
            a.a.display(),
            x.height(),
            x.width(),
            a.b.display(),
            y.height(),
            y.width()
        )));
    }
    let region = match &a.overlap {
        Some(t) => parse_overlap(t)?,
        None => OverlapRegion::full(x.height(), x.width()),
    };
    if !region.fits(&x) {
        return Err(CliError::usage(format!(
            "--overlap {region:?} exceeds the {}x{} image",
            x.height(),
            x.width()
        )));
    }
    let q = evaluate(&x, &y, a.range, region)?;
    let text = serde_json::to_string(&quality_json(&q)).map_err(Error::from)?;
    println!("{text}");
    Ok(())
}

fn cmd_pattern(a: PatternArgs) -> CliResult<()> {
    if a.height == 0 || a.width == 0 {
        return Err(CliError::usage("--height and --width must be >= 1"));
    }
    if a.color {
        let img = test_pattern_color(a.height, a.width, a.seed);
        let scaled = RgbGrid::new(
            rescale(&img.channels[0], a.low, a.high),
            rescale(&img.channels[1], a.low, a.high),
            rescale(&img.channels[2], a.low, a.high),
        )?;
        write_rgb(&a.out, &scaled)?;
    } else {
        write_gray(&a.out, &rescale(&test_pattern(a.height, a.width, a.seed), a.low, a.high))?;
    }
    Ok(())
}

/// Motion sidecar as written by `synth`.
pub fn read_motions(path: &Path) -> crate::Result<Vec<MotionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}
