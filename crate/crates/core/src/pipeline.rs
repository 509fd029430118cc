//! End-to-end driver: keyframes, windows, averaging, window bundle
//! adjustment, merging and refinement.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use nalgebra::Point3;
use rayon::prelude::*;
use thiserror::Error;

use crate::averaging::{
    average_rotations, average_translations, build_camera_point_constraints, AveragingError, AveragingProblem,
    PositionEstimateSet, RotationConfig,
};
use crate::bundle::{
    global_refine, initialize_structure, merge_window, trajectory, window_bundle_adjust, BundleError, GlobalMap,
    LmSummary, MergeOutcome, RefineReport, TumPose, WindowEstimate,
};
use crate::config::PipelineConfig;
use crate::eval::{ate_rmse_segments, count_breaks, depth_rmse, EvalError, EvalReport};
use crate::geometry::CameraIntrinsics;
use crate::tracking::{select_keyframes, Frame, KeyframeDecision, TrackId, TrackTable, Tracker, TrackingError};
use crate::viewgraph::{build_window, plan_windows, Keyframe, ViewGraphConfig, ViewGraphError, Window};

/// Stage names, in reporting order.
pub const STAGES: [&str; 8] = [
    "tracking",
    "keyframes",
    "relative_pose",
    "rotation_averaging",
    "translation_averaging",
    "window_ba",
    "merge",
    "global_refine",
];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error("sequence has {0} keyframes, need at least 2")]
    TooFewKeyframes(usize),
    #[error("no window could be reconstructed")]
    NoWindows,
    #[error("track table is empty")]
    NoTracks,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WindowStatus {
    Merged(MergeOutcome),
    /// View graph split; only fragments with at least two keyframes go on.
    Fragment,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSummary {
    pub window_id: usize,
    pub first_frame: usize,
    pub keyframes: usize,
    pub edges: usize,
    pub loop_edges: usize,
    pub status: WindowStatus,
    pub rmse_px: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub map: GlobalMap,
    pub keyframes: Vec<KeyframeDecision>,
    pub windows: Vec<WindowSummary>,
    /// Window bundle adjustment solves, in window order.
    pub ba_summaries: Vec<LmSummary>,
    pub refinements: Vec<RefineReport>,
    /// Seconds per stage, summed over windows when they run in parallel.
    pub stage_seconds: Vec<(String, f64)>,
}

#[derive(Default)]
struct Timer {
    seconds: BTreeMap<&'static str, Duration>,
}

impl Timer {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.seconds.entry(stage).or_default() += start.elapsed();
        out
    }

    fn absorb(&mut self, other: Timer) {
        for (k, v) in other.seconds {
            *self.seconds.entry(k).or_default() += v;
        }
    }

    fn report(&self) -> Vec<(String, f64)> {
        STAGES
            .iter()
            .map(|s| (s.to_string(), self.seconds.get(s).map_or(0.0, Duration::as_secs_f64)))
            .collect()
    }
}

/// Runs the LK front-end over decoded frames.
pub fn track_frames(frames: &[Frame], cfg: &PipelineConfig) -> Result<TrackTable, TrackingError> {
    let mut tracker = Tracker::new(cfg.tracker);
    for frame in frames {
        tracker.advance(frame)?;
    }
    Ok(tracker.table)
}

fn timestamp(timestamps: &[f64], frame: usize, fps: f64) -> f64 {
    timestamps.get(frame).copied().unwrap_or(frame as f64 / fps)
}

/// Builds windows over `keyframes`, splitting disconnected view graphs.
fn build_windows(
    keyframes: &[Keyframe],
    intr: &CameraIntrinsics,
    vg: &ViewGraphConfig,
    summaries: &mut Vec<WindowSummary>,
) -> Vec<Window> {
    let mut windows = Vec::new();
    let mut pending: Vec<(Vec<Keyframe>, usize)> = plan_windows(keyframes.len(), vg)
        .into_iter()
        .enumerate()
        .map(|(k, r)| (keyframes[r].to_vec(), if k == 0 { 0 } else { vg.overlap }))
        .rev()
        .collect();
    while let Some((kfs, overlap)) = pending.pop() {
        let window_id = summaries.len();
        let summary = |status, edges: usize, loops: usize| WindowSummary {
            window_id,
            first_frame: kfs[0].frame_index,
            keyframes: kfs.len(),
            edges,
            loop_edges: loops,
            status,
            rmse_px: None,
        };
        if kfs.len() < 2 {
            debug!("dropping single-keyframe window at frame {}", kfs[0].frame_index);
            continue;
        }
        match build_window(window_id, kfs.clone(), overlap, intr, vg) {
            Ok(w) => {
                let loops = w.edges.iter().filter(|e| e.kind == crate::viewgraph::EdgeKind::LoopClosure).count();
                summaries.push(summary(WindowStatus::Fragment, w.edges.len(), loops));
                windows.push(w);
            }
            Err(ViewGraphError::DisconnectedGraph { split_at }) => {
                warn!("view graph split at frame {}", kfs[split_at].frame_index);
                let tail = kfs[split_at..].to_vec();
                let head = kfs[..split_at].to_vec();
                pending.push((tail, 0));
                pending.push((head, overlap));
            }
            Err(e) => {
                summaries.push(summary(WindowStatus::Failed(e.to_string()), 0, 0));
            }
        }
    }
    windows
}

enum WindowFailure {
    Averaging(AveragingError),
    Bundle(BundleError),
}

impl std::fmt::Display for WindowFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Averaging(e) => write!(f, "averaging: {e}"),
            Self::Bundle(e) => write!(f, "bundle adjustment: {e}"),
        }
    }
}

fn solve_window(
    window: &Window,
    intr: &CameraIntrinsics,
    cfg: &PipelineConfig,
    timer: &mut Timer,
) -> Result<WindowEstimate, WindowFailure> {
    let problem = AveragingProblem::from_window(window);
    let rot_cfg = RotationConfig { seed: cfg.seed ^ window.window_id as u64, ..cfg.rotation };
    let rotations =
        timer.time("rotation_averaging", || average_rotations(&problem, &rot_cfg)).map_err(WindowFailure::Averaging)?;
    let positions = timer
        .time("translation_averaging", || {
            let rays = build_camera_point_constraints(&window.keyframes, &rotations, intr, cfg.translation.k_tracks);
            average_translations(&problem, &rotations, &rays, &cfg.translation)
        })
        .map_err(WindowFailure::Averaging)?;
    timer.time("window_ba", || {
        let refined = initialize_structure(window, &rotations, &positions, intr, cfg.parallax_min);
        let linear_set = PositionEstimateSet { positions: positions.linear_positions.clone(), ..positions.clone() };
        let linear = initialize_structure(window, &rotations, &linear_set, intr, cfg.parallax_min);
        // Start bundle adjustment from whichever averaging stage explains the
        // observations better.
        let cost = |e: &WindowEstimate| e.robust_cost(cfg.ba.huber_px, cfg.ba.outlier_px);
        let est = match (refined, linear) {
            (Ok(a), Ok(b)) => {
                if cost(&b) < cost(&a) {
                    b
                } else {
                    a
                }
            }
            (Ok(a), Err(_)) | (Err(_), Ok(a)) => a,
            (Err(e), Err(_)) => return Err(e),
        };
        window_bundle_adjust(est, &cfg.ba)
    })
    .map_err(WindowFailure::Bundle)
}

/// Runs the back-end on a track table. `timestamps[f]` is the time of frame
/// `f`; missing entries fall back to `f / fps`.
pub fn run_pipeline(
    table: &TrackTable,
    timestamps: &[f64],
    intr: &CameraIntrinsics,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    run_with_timer(table, timestamps, intr, cfg, Timer::default())
}

/// Tracks `frames` and runs the back-end on the result.
pub fn run_on_frames(
    frames: &[Frame],
    intr: &CameraIntrinsics,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    let mut timer = Timer::default();
    let table = timer.time("tracking", || track_frames(frames, cfg))?;
    let mut timestamps = vec![0.0; frames.iter().map(|f| f.index + 1).max().unwrap_or(0)];
    for f in frames {
        timestamps[f.index] = f.timestamp;
    }
    run_with_timer(&table, &timestamps, intr, cfg, timer)
}

fn run_with_timer(
    table: &TrackTable,
    timestamps: &[f64],
    intr: &CameraIntrinsics,
    cfg: &PipelineConfig,
    mut timer: Timer,
) -> Result<PipelineOutput, PipelineError> {
    let first = table.tracks.values().filter_map(|t| t.first_frame()).min().ok_or(PipelineError::NoTracks)?;
    let last = table.last_frame().ok_or(PipelineError::NoTracks)?;

    let (decisions, keyframes) = timer.time("keyframes", || {
        let decisions = select_keyframes(table, first, last, &cfg.keyframes);
        let keyframes: Vec<Keyframe> = decisions
            .iter()
            .enumerate()
            .map(|(k, d)| {
                Keyframe::from_table(k, d.frame_index, timestamp(timestamps, d.frame_index, cfg.fps), table)
            })
            .collect();
        (decisions, keyframes)
    });
    if keyframes.len() < 2 {
        return Err(PipelineError::TooFewKeyframes(keyframes.len()));
    }
    info!("{} keyframes over frames {first}..={last}", keyframes.len());

    let vg = ViewGraphConfig { ransac: cfg.ransac(), ..cfg.viewgraph };
    let mut summaries = Vec::new();
    let windows = timer.time("relative_pose", || build_windows(&keyframes, intr, &vg, &mut summaries));

    // Windows are independent until merging; solve them in parallel.
    let solved: Vec<(Result<WindowEstimate, WindowFailure>, Timer)> = windows
        .par_iter()
        .map(|w| {
            let mut t = Timer::default();
            let r = solve_window(w, intr, cfg, &mut t);
            (r, t)
        })
        .collect();

    let mut map = GlobalMap::new(cfg.parallax_min);
    let mut ba_summaries = Vec::new();
    let mut refinements = Vec::new();
    for (window, (result, t)) in windows.iter().zip(solved) {
        timer.absorb(t);
        let summary = &mut summaries[window.window_id];
        let est = match result {
            Ok(est) => est,
            Err(e) => {
                warn!("window {} dropped: {e}", window.window_id);
                summary.status = WindowStatus::Failed(e.to_string());
                continue;
            }
        };
        if let Some(s) = &est.ba {
            ba_summaries.push(s.clone());
        }
        summary.rmse_px = Some(est.rmse());
        let outcome = timer.time("merge", || merge_window(&mut map, &est));
        if let MergeOutcome::NewSegment(reason) = outcome {
            warn!("break before frame {}: {reason:?}", est.keyframes[0].frame_index);
        }
        summary.status = WindowStatus::Merged(outcome);
        match timer.time("global_refine", || global_refine(&mut map, cfg.refine_trigger_px, &cfg.ba)) {
            Ok(Some(report)) => {
                info!("refined segment {}: {:.3} -> {:.3} px", report.segment, report.rmse_before, report.rmse_after);
                refinements.push(report);
            }
            Ok(None) => {}
            Err(e) => warn!("global refinement skipped: {e}"),
        }
    }
    if map.is_empty() {
        return Err(PipelineError::NoWindows);
    }
    Ok(PipelineOutput {
        map,
        keyframes: decisions,
        windows: summaries,
        ba_summaries,
        refinements,
        stage_seconds: timer.report(),
    })
}

impl PipelineOutput {
    /// Breaks over the keyframe sequence: new map segments plus runs of
    /// keyframes that no window managed to reconstruct.
    pub fn breaks(&self) -> usize {
        let frames: Vec<usize> = self.keyframes.iter().map(|k| k.frame_index).collect();
        count_breaks(&self.map, &frames)
    }

    /// Map keyframe trajectory, all segments, frame order.
    pub fn trajectory(&self) -> Vec<TumPose> {
        trajectory(&self.map)
    }

    /// Trajectory split by segment.
    pub fn segments(&self) -> Vec<Vec<TumPose>> {
        let n = self.map.segment_count();
        (0..n)
            .map(|s| {
                let mut seg = self.map.clone();
                seg.keyframes.retain(|k| k.segment == s);
                trajectory(&seg)
            })
            .collect()
    }

    pub fn points(&self) -> Vec<Point3<f64>> {
        self.map.points.values().map(|p| p.position).collect()
    }

    /// Report with the effective configuration, per-window RMSE, stage
    /// timings and, when ground truth is given, ATE and depth errors.
    pub fn report(
        &self,
        cfg: &PipelineConfig,
        gt: Option<&[TumPose]>,
        gt_points: Option<&BTreeMap<TrackId, Point3<f64>>>,
    ) -> Result<EvalReport, EvalError> {
        let mut report = EvalReport {
            breaks: self.breaks(),
            window_rmse_px: self.windows.iter().filter_map(|w| w.rmse_px.map(|r| (w.window_id, r))).collect(),
            stage_seconds: self.stage_seconds.clone(),
            entries: cfg.entries(),
            ..Default::default()
        };
        report.entries.push(("keyframes".into(), self.keyframes.len().to_string()));
        report.entries.push(("windows".into(), self.windows.len().to_string()));
        report.entries.push(("points".into(), self.map.points.len().to_string()));
        report.entries.push(("refinements".into(), self.refinements.len().to_string()));
        let focal = self.map.keyframes.last().map(|k| k.intrinsics);
        if let Some(i) = focal {
            report.entries.push(("estimated.focal".into(), format!("{:.6}", i.focal)));
            report.entries.push(("estimated.r".into(), format!("{:.6}", i.distortion_r)));
        }
        if let Some(gt) = gt {
            let ate = ate_rmse_segments(&self.segments(), gt)?;
            report.ate_rmse_m = Some(ate.rmse);
            if let Some(gt_points) = gt_points {
                report.depth_rmse_cm = Some(self.depth_rmse_cm(&ate.similarities, gt_points)?);
            }
        }
        Ok(report)
    }

    /// Point RMSE in centimeters, each segment's points aligned with that
    /// segment's trajectory alignment.
    pub fn depth_rmse_cm(
        &self,
        alignments: &[Option<crate::geometry::Similarity>],
        gt_points: &BTreeMap<TrackId, Point3<f64>>,
    ) -> Result<f64, EvalError> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (s, align) in alignments.iter().enumerate() {
            let Some(align) = align else { continue };
            let pts: Vec<(TrackId, Point3<f64>)> =
                self.map.points.iter().filter(|(_, p)| p.segment == s).map(|(t, p)| (*t, p.position)).collect();
            let matched = pts.iter().filter(|(t, _)| gt_points.contains_key(t)).count();
            if matched == 0 {
                continue;
            }
            let rmse = depth_rmse(&pts, gt_points, align)? / 100.0;
            sum += rmse * rmse * matched as f64;
            n += matched;
        }
        if n == 0 {
            return Err(EvalError::NoAssociations);
        }
        Ok(100.0 * (sum / n as f64).sqrt())
    }
}
