//! `mbdepth` command line: generate, train, eval, export.

use crate::bundle_io::{read_bundle, render_synthetic_bundle, write_blob, write_bundle, LidarModel, RenderParams, SceneSpec, TremorParams};
use crate::eval::{depth_metrics, depth_to_normals, photometric_error, read_depth_file, write_normals_png, write_pfm, EvalReport};
use crate::geometry::Intrinsics;
use crate::neural::write_checkpoint;
use crate::refine::{compute_z_avg, reconstruct, train_with_progress, format_log_line, Precision, TrainConfig};
use crate::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mbdepth", version, about = "Multi-frame depth refinement from hand-held micro-baseline bursts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic bundle with ground-truth depth.
    Generate(GenerateArgs),
    /// Train the refinement model and write Z_avg and Z*.
    Train(TrainArgs),
    /// Photometric and (if available) ground-truth depth error of a depth map.
    Eval(EvalArgs),
    /// Convert a depth map to PFM and/or a normal-map PNG.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Built-in scene (plane, sphere-on-plane, box-on-plane, checker, flat) or a TOML scene file.
    #[arg(long)]
    pub scene: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 120)]
    pub frames: usize,
    /// RGB resolution as WxH; the depth grid is 1/8 of it unless --depth-res is given.
    #[arg(long, default_value = "480x360", value_parser = parse_res)]
    pub res: (usize, usize),
    #[arg(long, value_parser = parse_res)]
    pub depth_res: Option<(usize, usize)>,
    /// Depth noise std (m).
    #[arg(long, default_value_t = 0.005)]
    pub noise: f64,
    /// Peak depth bias (m).
    #[arg(long, default_value_t = 0.01)]
    pub bias: f64,
    /// Depth quantization step (m).
    #[arg(long)]
    pub quantization: Option<f64>,
    /// In-plane tremor step std per frame (m).
    #[arg(long)]
    pub tremor_std: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    #[arg(long, default_value_t = 11)]
    pub patch_k: usize,
    #[arg(long, default_value_t = 4096)]
    pub samples: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Replace sensor depth with 1 m and disable the regularizer.
    #[arg(long)]
    pub no_lidar: bool,
    /// Predict depth directly instead of a gated offset.
    #[arg(long)]
    pub direct_depth: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub confidence_lr: Option<f64>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    #[arg(long)]
    pub no_median: bool,
    /// Do not print per-epoch progress.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Depth map (blob or PFM).
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long)]
    pub normals: Option<PathBuf>,
    #[arg(long)]
    pub pfm: Option<PathBuf>,
    /// Take intrinsics for the normals from this bundle's reference frame.
    #[arg(long, conflicts_with = "intrinsics")]
    pub bundle: Option<PathBuf>,
    /// Intrinsics for the normals as fx,fy,cx,cy.
    #[arg(long, value_parser = parse_intrinsics)]
    pub intrinsics: Option<Intrinsics>,
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w: usize = w.trim().parse().map_err(|_| "bad width")?;
    let h: usize = h.trim().parse().map_err(|_| "bad height")?;
    if w == 0 || h == 0 {
        return Err("resolution must be positive".into());
    }
    Ok((w, h))
}

fn parse_intrinsics(s: &str) -> Result<Intrinsics, String> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let [fx, fy, cx, cy] = v[..] else {
        return Err("expected fx,fy,cx,cy".into());
    };
    Intrinsics::new(fx, fy, cx, cy).map_err(|e| e.to_string())
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(Error::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Export(a) => export(a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_scene(spec: &str) -> Result<SceneSpec, Error> {
    if let Some(s) = SceneSpec::by_name(spec) {
        return Ok(s);
    }
    let path = Path::new(spec);
    if !path.is_file() {
        return Err(Error::Usage(format!("unknown scene `{spec}` (not a built-in name or a file)")));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| Error::Usage(format!("{spec}: {e}")))
}

fn generate(a: GenerateArgs) -> Result<(), Error> {
    let scene = load_scene(&a.scene)?;
    if a.frames == 0 || a.frames > crate::refine::MAX_FRAMES {
        return Err(Error::Usage(format!("--frames must be in 1..={}", crate::refine::MAX_FRAMES)));
    }
    let mut render = RenderParams::with_resolution(a.res.0, a.res.1);
    if let Some((w, h)) = a.depth_res {
        render.depth_width = w;
        render.depth_height = h;
    }
    let mut tremor = TremorParams {
        frames: a.frames,
        seed: a.seed,
        ..Default::default()
    };
    if let Some(s) = a.tremor_std {
        tremor.translation_std[0] = s;
        tremor.translation_std[1] = s;
    }
    let lidar = LidarModel {
        noise_std: a.noise,
        bias_amplitude: a.bias,
        quantization: a.quantization,
        seed: a.seed,
        ..Default::default()
    };
    let synth = render_synthetic_bundle(&scene, &tremor, &render, &lidar)?;
    let manifest = write_bundle(&synth.bundle, &a.out)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let bundle = read_bundle(&a.bundle)?;
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        samples: a.samples,
        patch_half_width: a.patch_k,
        levels: a.levels.unwrap_or(defaults.levels),
        alpha: if a.no_lidar { 0.0 } else { a.alpha },
        base_lr: a.lr.unwrap_or(defaults.base_lr),
        decay: a.decay.unwrap_or(defaults.decay),
        confidence_lr: a.confidence_lr.unwrap_or(defaults.confidence_lr),
        epochs: a.epochs,
        frame_stride: a.stride,
        direct_depth: a.direct_depth,
        constant_init_depth: a.no_lidar.then_some(1.0),
        median_filter_confidence: !a.no_median,
        seed: a.seed,
        precision: match a.precision {
            Some(PrecisionArg::F32) => Precision::F32,
            Some(PrecisionArg::F64) => Precision::F64,
            None => defaults.precision,
        },
        ..defaults
    };
    config.validate()?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let log_path = a.out.join("train.log");
    let mut log = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let steps = bundle.query_indices(config.frame_stride).len();
    if !a.quiet {
        eprintln!("training {} epochs, {steps} steps per epoch", config.epochs);
    }
    let start = Instant::now();
    let mut log_error = None;
    let out = train_with_progress(&bundle, &config, |e| {
        if let Err(err) = writeln!(log, "{}", format_log_line(e)).and_then(|_| log.flush()) {
            log_error.get_or_insert(err);
        }
        if !a.quiet {
            eprintln!(
                "epoch {:>4}  lr {:.3e}  photometric {:.4e}  geometric {:.4e}  total {:.4e}  ({:.0}s)",
                e.epoch,
                e.lr,
                e.mean_photometric,
                e.mean_geometric,
                e.mean_total,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    if let Some(err) = log_error {
        return Err(io_err(&log_path)(err));
    }
    // The averaged depth is always taken from the bundle as captured; with
    // --no-lidar the starting point is the constant depth instead.
    let base = match config.constant_init_depth {
        Some(z) => bundle.with_constant_depth(z)?,
        None => bundle,
    };
    let z_avg = compute_z_avg(&base)?;
    let z_star = reconstruct(&out.model, &base, &z_avg)?;
    let ckpt_path = a.out.join("model.ckpt");
    let f = fs::File::create(&ckpt_path).map_err(io_err(&ckpt_path))?;
    write_checkpoint(std::io::BufWriter::new(f), &out.model.to_checkpoint(config.seed))?;
    write_blob(&a.out.join("confidence.bin"), out.model.confidence.grid())?;
    write_blob(&a.out.join("z_avg.bin"), &z_avg)?;
    write_blob(&a.out.join("z_star.bin"), &z_star)?;
    println!("steps_per_epoch: {steps}");
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let start = Instant::now();
    let bundle = read_bundle(&a.bundle)?;
    let depth = read_depth_file(&a.depth)?;
    let pe = photometric_error(&depth, &bundle)?;
    let dm = bundle.ground_truth().map(|gt| depth_metrics(&depth, gt, None)).transpose()?;
    let (h, w, _, _) = bundle.dims();
    let report = EvalReport {
        bundle: a.bundle.display().to_string(),
        depth: a.depth.display().to_string(),
        frames: bundle.len(),
        width: w,
        height: h,
        pe_mae: pe.mae,
        pe_mse: pe.mse,
        pe_samples: pe.samples,
        depth_mae: dm.map(|m| m.mae),
        depth_rmse: dm.map(|m| m.rmse),
        depth_pixels: dm.map(|m| m.pixels),
        eval_seconds: start.elapsed().as_secs_f64(),
    };
    let text = report.to_text();
    fs::write(&a.report, &text).map_err(io_err(&a.report))?;
    print!("{text}");
    Ok(())
}

fn export(a: ExportArgs) -> Result<(), Error> {
    if a.normals.is_none() && a.pfm.is_none() {
        return Err(Error::Usage("nothing to export: pass --normals and/or --pfm".into()));
    }
    let depth = read_depth_file(&a.depth)?;
    if let Some(p) = &a.pfm {
        write_pfm(p, &depth)?;
    }
    if let Some(p) = &a.normals {
        let k = match (&a.intrinsics, &a.bundle) {
            (Some(k), _) => *k,
            (None, Some(b)) => read_bundle(b)?.reference().intrinsics_rgb,
            // Default camera of the synthetic generator.
            (None, None) => RenderParams::with_resolution(depth.width(), depth.height()).intrinsics(),
        };
        let normals = depth_to_normals(&depth, &k)?;
        write_normals_png(p, &normals)?;
    }
    Ok(())
}
