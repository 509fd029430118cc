use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use winsfm::bundle::{write_ply, write_tum, TumPose};
use winsfm::config::{parse_intrinsics, write_intrinsics, IntrinsicsFile, PipelineConfig};
use winsfm::eval::{
    ate_rmse, depth_rmse, generate_sequence, parse_gt_points, parse_kitti, parse_tum, render_frame, write_gt_points,
    GeneratorOptions, MotionProfile, ProfileKind, SyntheticScene,
};
use winsfm::pipeline::{run_on_frames, run_pipeline};
use winsfm::tracking::image::{encode_pgm, load_frames, parse_times};
use winsfm::tracking::{TrackId, TrackTable, TrackingError};

const EXIT_BREAKS: u8 = 2;
const EXIT_FATAL: u8 = 1;
const EXIT_USAGE: u8 = 64;
const EXIT_DATA: u8 = 65;
const EXIT_IO: u8 = 66;

#[derive(Parser, Debug)]
#[command(name = "winsfm", version, about = "Windowed global SfM for monocular video")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Shared {
    /// Seed for every randomized stage; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Reconstruct a sequence from a tracks file or an image directory.
    Run(RunArgs),
    /// Generate a synthetic sequence with ground truth.
    Synth(SynthArgs),
    /// Score an estimated trajectory against ground truth.
    Eval(EvalArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum TrajectoryFormat {
    Tum,
    Kitti,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Tracks file with `track_id frame x y` lines.
    #[arg(long, conflicts_with = "images")]
    tracks: Option<PathBuf>,
    /// Directory of PGM or PNG frames, optionally with `times.txt`.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Timestamps for a tracks file, one per frame.
    #[arg(long)]
    times: Option<PathBuf>,
    /// Camera intrinsics file.
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Ground-truth trajectory; enables ATE in the report.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tum")]
    gt_format: TrajectoryFormat,
    /// Ground-truth points (`track_id x y z`); enables depth RMSE.
    #[arg(long)]
    gt_points: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// frontal, left-right or egomotion.
    #[arg(long)]
    profile: String,
    /// Path length in meters; defaults to the profile's replica length.
    #[arg(long)]
    length: Option<f64>,
    /// Frame count; defaults to the path length at walking speed.
    #[arg(long)]
    frames: Option<usize>,
    /// Pixel noise standard deviation.
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    /// Frames without observations, `START..END`.
    #[arg(long, value_parser = parse_range)]
    gap: Option<Range<usize>>,
    /// Also write rendered PGM frames to `frames/`.
    #[arg(long)]
    render: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Estimated trajectory (TUM).
    #[arg(long)]
    est: PathBuf,
    /// Ground-truth trajectory.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value = "tum")]
    gt_format: TrajectoryFormat,
    /// Timestamps for a KITTI ground truth.
    #[arg(long)]
    gt_times: Option<PathBuf>,
    /// Estimated points (`track_id x y z`).
    #[arg(long, requires = "gt_points")]
    est_points: Option<PathBuf>,
    /// Ground-truth points (`track_id x y z`).
    #[arg(long, requires = "est_points")]
    gt_points: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<Range<usize>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected START..END, got {s:?}"))?;
    let start: usize = a.trim().parse().map_err(|_| format!("bad start {a:?}"))?;
    let end: usize = b.trim().parse().map_err(|_| format!("bad end {b:?}"))?;
    if end <= start {
        return Err(format!("empty range {s:?}"));
    }
    Ok(start..end)
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
    fn data(path: &Path, err: impl fmt::Display) -> Self {
        Self { code: EXIT_DATA, message: format!("{}: {err}", path.display()) }
    }
    fn io(path: &Path, err: impl fmt::Display) -> Self {
        Self { code: EXIT_IO, message: format!("{}: {err}", path.display()) }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::io(path, e))
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn load_config(shared: &Shared) -> Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &shared.config {
        let text = read_text(path)?;
        cfg.apply_text(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    }
    for o in &shared.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v).map_err(|e| Failure::usage(e.to_string()))?;
    }
    if let Some(seed) = shared.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &shared.out {
        cfg.paths.out = Some(out.clone());
    }
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(cfg)
}

fn read_trajectory(path: &Path, format: TrajectoryFormat, times: Option<&Path>) -> Result<Vec<TumPose>, Failure> {
    let text = read_text(path)?;
    match format {
        TrajectoryFormat::Tum => parse_tum(&text).map_err(|e| Failure::data(path, e)),
        TrajectoryFormat::Kitti => {
            let times = match times {
                Some(t) => Some(parse_times(&read_text(t)?).map_err(|e| Failure::data(t, e))?),
                None => None,
            };
            parse_kitti(&text, times.as_deref()).map_err(|e| Failure::data(path, e))
        }
    }
}

fn read_points(path: &Path) -> Result<BTreeMap<TrackId, nalgebra::Point3<f64>>, Failure> {
    parse_gt_points(&read_text(path)?).map_err(|e| Failure::data(path, e))
}

fn tracking_failure(path: &Path, e: TrackingError) -> Failure {
    match e {
        TrackingError::Io(msg) => Failure::io(path, msg),
        other => Failure::data(path, other),
    }
}

fn cmd_run(shared: &Shared, args: &RunArgs) -> Result<u8, Failure> {
    let mut cfg = load_config(shared)?;
    if let Some(p) = &args.tracks {
        cfg.paths.tracks = Some(p.clone());
        cfg.paths.images = None;
    }
    if let Some(p) = &args.images {
        cfg.paths.images = Some(p.clone());
        cfg.paths.tracks = None;
    }
    for (slot, flag) in [
        (&mut cfg.paths.times, &args.times),
        (&mut cfg.paths.intrinsics, &args.intrinsics),
        (&mut cfg.paths.ground_truth, &args.gt),
        (&mut cfg.paths.ground_truth_points, &args.gt_points),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    let paths = cfg.paths.clone();
    let out = paths.out.clone().ok_or_else(|| Failure::usage("no output directory (--out or path.out)"))?;
    let intr_path = paths.intrinsics.clone().ok_or_else(|| Failure::usage("no intrinsics (--intrinsics or path.intrinsics)"))?;
    let intr = parse_intrinsics(&read_text(&intr_path)?).map_err(|e| Failure::data(&intr_path, e))?;

    let output = match (&paths.tracks, &paths.images) {
        (Some(_), Some(_)) => return Err(Failure::usage("give either tracks or images, not both")),
        (None, None) => return Err(Failure::usage("no input (--tracks or --images)")),
        (Some(tracks), None) => {
            let table = TrackTable::parse(&read_text(tracks)?).map_err(|e| Failure::data(tracks, e))?;
            let bounds = intr.image_size.map(|(w, h)| (w as f64, h as f64));
            table.validate(bounds).map_err(|e| Failure::data(tracks, e))?;
            let timestamps = match &paths.times {
                Some(t) => parse_times(&read_text(t)?).map_err(|e| Failure::data(t, e))?,
                None => Vec::new(),
            };
            info!("{} tracks from {}", table.len(), tracks.display());
            run_pipeline(&table, &timestamps, &intr.intrinsics, &cfg)
        }
        (None, Some(dir)) => {
            let frames = load_frames(dir, cfg.fps).map_err(|e| tracking_failure(dir, e))?;
            info!("{} frames from {}", frames.len(), dir.display());
            run_on_frames(&frames, &intr.intrinsics, &cfg)
        }
    }
    .map_err(|e| Failure { code: EXIT_FATAL, message: format!("pipeline failed: {e}") })?;

    let gt = match &paths.ground_truth {
        Some(p) => Some(read_trajectory(p, args.gt_format, paths.times.as_deref())?),
        None => None,
    };
    let gt_points = match &paths.ground_truth_points {
        Some(p) => Some(read_points(p)?),
        None => None,
    };
    let report = output
        .report(&cfg, gt.as_deref(), gt_points.as_ref())
        .map_err(|e| Failure { code: EXIT_DATA, message: format!("evaluation failed: {e}") })?;

    create_dir(&out)?;
    write_file(&out.join("trajectory.txt"), write_tum(&output.trajectory()))?;
    write_file(&out.join("points.ply"), write_ply(&output.points()))?;
    let tagged: BTreeMap<TrackId, nalgebra::Point3<f64>> =
        output.map.points.iter().map(|(id, p)| (*id, p.position)).collect();
    write_file(&out.join("points.txt"), write_gt_points(&tagged))?;
    write_file(&out.join("report.txt"), report.to_text())?;
    println!("{}", report.summary_line());
    Ok(if report.breaks > 0 { EXIT_BREAKS } else { 0 })
}

fn replica_length(kind: ProfileKind) -> f64 {
    match kind {
        ProfileKind::Frontal => 2.0,
        ProfileKind::LeftRight => 4.0,
        ProfileKind::Egomotion => 3.7,
    }
}

fn cmd_synth(shared: &Shared, args: &SynthArgs) -> Result<u8, Failure> {
    let cfg = load_config(shared)?;
    let kind: ProfileKind = args.profile.parse().map_err(Failure::usage)?;
    let out = cfg.paths.out.clone().ok_or_else(|| Failure::usage("no output directory (--out or path.out)"))?;
    let length = args.length.unwrap_or_else(|| replica_length(kind));
    if !(length > 0.0 && length.is_finite()) {
        return Err(Failure::usage(format!("--length must be positive, got {length}")));
    }
    let mut profile = MotionProfile::new(kind, length);
    profile.fps = cfg.fps;
    profile.seed = cfg.seed;
    let scene = SyntheticScene::replica(&profile, cfg.seed);
    let n = args.frames.unwrap_or_else(|| profile.default_frames());
    let opts = GeneratorOptions { noise_px: args.noise, seed: cfg.seed, gap: args.gap.clone() };
    let seq = generate_sequence(&scene, &profile, n, &opts).map_err(|e| Failure::usage(e.to_string()))?;

    create_dir(&out)?;
    write_file(&out.join("tracks.txt"), seq.table.to_text())?;
    let times: String = seq.timestamps.iter().map(|t| format!("{t:.9}\n")).collect();
    write_file(&out.join("times.txt"), &times)?;
    let intr = IntrinsicsFile { intrinsics: seq.intrinsics, image_size: Some((seq.width, seq.height)) };
    write_file(&out.join("intrinsics.txt"), write_intrinsics(&intr))?;
    write_file(&out.join("groundtruth.txt"), write_tum(&seq.gt_trajectory()))?;
    write_file(&out.join("points_gt.txt"), write_gt_points(&seq.gt_points))?;
    if args.render {
        let dir = out.join("frames");
        create_dir(&dir)?;
        for (f, pose) in seq.gt_poses.iter().enumerate() {
            write_file(&dir.join(format!("{f:06}.pgm")), encode_pgm(&render_frame(&scene, pose)))?;
        }
        write_file(&dir.join("times.txt"), &times)?;
    }
    println!("FRAMES={} TRACKS={} PROFILE={} LENGTH_M={length}", n, seq.table.len(), kind.as_str());
    Ok(0)
}

fn cmd_eval(shared: &Shared, args: &EvalArgs) -> Result<u8, Failure> {
    let cfg = load_config(shared)?;
    let est = read_trajectory(&args.est, TrajectoryFormat::Tum, None)?;
    let gt = read_trajectory(&args.gt, args.gt_format, args.gt_times.as_deref())?;
    let ate = ate_rmse(&est, &gt).map_err(|e| Failure { code: EXIT_DATA, message: format!("association failed: {e}") })?;
    let depth = match (&args.est_points, &args.gt_points) {
        (Some(e), Some(g)) => {
            let est_points: Vec<_> = read_points(e)?.into_iter().collect();
            let rmse = depth_rmse(&est_points, &read_points(g)?, &ate.similarity).map_err(|err| Failure::data(e, err))?;
            format!("{rmse:.6}")
        }
        _ => "NA".to_string(),
    };
    let line = format!("ATE_RMSE_M={:.6} DEPTH_RMSE_CM={depth} PAIRS={}", ate.rmse, ate.pairs);
    if let Some(out) = &cfg.paths.out {
        create_dir(out)?;
        write_file(&out.join("eval.txt"), format!("{line}\n"))?;
    }
    println!("{line}");
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Run(args) => cmd_run(&cli.shared, args),
        Command::Synth(args) => cmd_synth(&cli.shared, args),
        Command::Eval(args) => cmd_eval(&cli.shared, args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
