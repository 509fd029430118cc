//! Pipeline configuration: `key = value` text with validated ranges.

use std::collections::BTreeSet;
use std::path::PathBuf;

use thiserror::Error;

use crate::averaging::{RotationConfig, TranslationConfig};
use crate::bundle::BaConfig;
use crate::geometry::{CameraIntrinsics, MinimalSolver, RansacConfig};
use crate::tracking::{KeyframePolicy, TrackerConfig};
use crate::viewgraph::ViewGraphConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("missing key {0:?}")]
    MissingKey(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathConfig {
    pub tracks: Option<PathBuf>,
    pub images: Option<PathBuf>,
    /// Per-frame timestamps for a tracks file, one per line.
    pub times: Option<PathBuf>,
    pub intrinsics: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub ground_truth_points: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Frame rate assumed for image directories without timestamps.
    pub fps: f64,
    pub keyframes: KeyframePolicy,
    pub tracker: TrackerConfig,
    pub viewgraph: ViewGraphConfig,
    /// Minimum ray angle for triangulation (radians).
    pub parallax_min: f64,
    pub rotation: RotationConfig,
    pub translation: TranslationConfig,
    pub ba: BaConfig,
    /// Cross-window RMSE above which the segment is refined (pixels).
    pub refine_trigger_px: f64,
    pub paths: PathConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fps: 30.0,
            keyframes: KeyframePolicy::default(),
            tracker: TrackerConfig::default(),
            viewgraph: ViewGraphConfig::default(),
            parallax_min: 1f64.to_radians(),
            rotation: RotationConfig::default(),
            translation: TranslationConfig::default(),
            ba: BaConfig::default(),
            refine_trigger_px: 2.0,
            paths: PathConfig::default(),
        }
    }
}

fn invalid(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue { key: key.into(), value: value.into(), reason: reason.into() }
}

fn parse_f64(key: &str, value: &str) -> Result<f64, ConfigError> {
    match value.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(invalid(key, value, "expected a finite number")),
    }
}

fn positive(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v = parse_f64(key, value)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(invalid(key, value, "must be positive"))
    }
}

fn non_negative(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v = parse_f64(key, value)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(invalid(key, value, "must be non-negative"))
    }
}

fn fraction(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v = parse_f64(key, value)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(invalid(key, value, "must lie in [0, 1]"))
    }
}

fn count(key: &str, value: &str, min: usize) -> Result<usize, ConfigError> {
    match value.parse::<usize>() {
        Ok(v) if v >= min => Ok(v),
        Ok(_) => Err(invalid(key, value, format!("must be at least {min}"))),
        Err(_) => Err(invalid(key, value, "expected a non-negative integer")),
    }
}

fn flag(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(invalid(key, value, "expected true or false")),
    }
}

fn path_entry(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(String::new, |p| p.display().to_string())
}

fn solver_name(s: MinimalSolver) -> &'static str {
    match s {
        MinimalSolver::EightPoint => "eight-point",
        MinimalSolver::FivePoint => "five-point",
    }
}

impl PipelineConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let path = || (!value.is_empty()).then(|| PathBuf::from(value));
        match key {
            "seed" => self.seed = value.parse().map_err(|_| invalid(key, value, "expected an unsigned integer"))?,
            "fps" => self.fps = positive(key, value)?,
            "keyframe.period" => self.keyframes.period = count(key, value, 1)?,
            "keyframe.flow_px" => self.keyframes.flow_threshold = positive(key, value)?,
            "tracker.max_corners" => self.tracker.corners.max_corners = count(key, value, 1)?,
            "tracker.quality" => self.tracker.corners.quality = fraction(key, value)?,
            "tracker.min_distance_px" => self.tracker.corners.min_distance = non_negative(key, value)?,
            "tracker.levels" => self.tracker.lk.levels = count(key, value, 1)?,
            "tracker.window_px" => {
                let w = count(key, value, 3)?;
                if w % 2 == 0 {
                    return Err(invalid(key, value, "must be odd"));
                }
                self.tracker.lk.window = w;
            }
            "tracker.fb_max_px" => self.tracker.lk.fb_max = positive(key, value)?,
            "window.min" => self.viewgraph.w_min = count(key, value, 1)?,
            "window.max" => self.viewgraph.w_max = count(key, value, 1)?,
            "window.overlap" => self.viewgraph.overlap = count(key, value, 0)?,
            "loop.enabled" => self.viewgraph.loop_closure = flag(key, value)?,
            "loop.recent" => self.viewgraph.loop_recent = count(key, value, 1)?,
            "loop.min_ratio" => self.viewgraph.loop_min_ratio = fraction(key, value)?,
            "edge.min_shared" => self.viewgraph.min_shared = count(key, value, 8)?,
            "ransac.threshold" => self.viewgraph.ransac.threshold = positive(key, value)?,
            "ransac.max_iterations" => self.viewgraph.ransac.max_iterations = count(key, value, 1)?,
            "ransac.min_inlier_ratio" => self.viewgraph.ransac.min_inlier_ratio = fraction(key, value)?,
            "ransac.confidence" => {
                let c = fraction(key, value)?;
                if !(c > 0.0 && c < 1.0) {
                    return Err(invalid(key, value, "must lie strictly between 0 and 1"));
                }
                self.viewgraph.ransac.confidence = c;
            }
            "ransac.solver" => {
                self.viewgraph.ransac.solver = match value {
                    "eight-point" => MinimalSolver::EightPoint,
                    "five-point" => MinimalSolver::FivePoint,
                    _ => return Err(invalid(key, value, "expected eight-point or five-point")),
                }
            }
            "ransac.reliable_parallax_deg" => {
                self.viewgraph.ransac.reliable_parallax = non_negative(key, value)?.to_radians()
            }
            "triangulation.parallax_min_deg" => self.parallax_min = non_negative(key, value)?.to_radians(),
            "rotation.huber_rad" => self.rotation.huber_delta = positive(key, value)?,
            "rotation.max_iterations" => self.rotation.max_iterations = count(key, value, 1)?,
            "rotation.tolerance_rad" => self.rotation.tolerance = positive(key, value)?,
            "translation.huber" => self.translation.huber_delta = positive(key, value)?,
            "translation.point_weight" => self.translation.point_weight = non_negative(key, value)?,
            "translation.k_tracks" => self.translation.k_tracks = count(key, value, 0)?,
            "translation.max_iterations" => self.translation.max_iterations = count(key, value, 0)?,
            "ba.max_iterations" => self.ba.max_iterations = count(key, value, 1)?,
            "ba.function_tolerance" => self.ba.function_tolerance = positive(key, value)?,
            "ba.parameter_tolerance" => self.ba.parameter_tolerance = positive(key, value)?,
            "ba.huber_px" => self.ba.huber_px = positive(key, value)?,
            "ba.damping_init" => self.ba.damping_init = positive(key, value)?,
            "ba.refine_intrinsics" => self.ba.refine_intrinsics = flag(key, value)?,
            "ba.intrinsics_min_rotation_deg" => {
                self.ba.intrinsics_min_rotation = non_negative(key, value)?.to_radians()
            }
            "ba.outlier_px" => self.ba.outlier_px = positive(key, value)?,
            "refine.trigger_px" => self.refine_trigger_px = positive(key, value)?,
            "path.tracks" => self.paths.tracks = path(),
            "path.images" => self.paths.images = path(),
            "path.times" => self.paths.times = path(),
            "path.intrinsics" => self.paths.intrinsics = path(),
            "path.out" => self.paths.out = path(),
            "path.ground_truth" => self.paths.ground_truth = path(),
            "path.ground_truth_points" => self.paths.ground_truth_points = path(),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Effective value of every key, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let v = &self.viewgraph;
        let r = &v.ransac;
        let e: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("fps", self.fps.to_string()),
            ("keyframe.period", self.keyframes.period.to_string()),
            ("keyframe.flow_px", self.keyframes.flow_threshold.to_string()),
            ("tracker.max_corners", self.tracker.corners.max_corners.to_string()),
            ("tracker.quality", self.tracker.corners.quality.to_string()),
            ("tracker.min_distance_px", self.tracker.corners.min_distance.to_string()),
            ("tracker.levels", self.tracker.lk.levels.to_string()),
            ("tracker.window_px", self.tracker.lk.window.to_string()),
            ("tracker.fb_max_px", self.tracker.lk.fb_max.to_string()),
            ("window.min", v.w_min.to_string()),
            ("window.max", v.w_max.to_string()),
            ("window.overlap", v.overlap.to_string()),
            ("loop.enabled", v.loop_closure.to_string()),
            ("loop.recent", v.loop_recent.to_string()),
            ("loop.min_ratio", v.loop_min_ratio.to_string()),
            ("edge.min_shared", v.min_shared.to_string()),
            ("ransac.threshold", r.threshold.to_string()),
            ("ransac.max_iterations", r.max_iterations.to_string()),
            ("ransac.min_inlier_ratio", r.min_inlier_ratio.to_string()),
            ("ransac.confidence", r.confidence.to_string()),
            ("ransac.solver", solver_name(r.solver).to_string()),
            ("ransac.reliable_parallax_deg", r.reliable_parallax.to_degrees().to_string()),
            ("triangulation.parallax_min_deg", self.parallax_min.to_degrees().to_string()),
            ("rotation.huber_rad", self.rotation.huber_delta.to_string()),
            ("rotation.max_iterations", self.rotation.max_iterations.to_string()),
            ("rotation.tolerance_rad", self.rotation.tolerance.to_string()),
            ("translation.huber", self.translation.huber_delta.to_string()),
            ("translation.point_weight", self.translation.point_weight.to_string()),
            ("translation.k_tracks", self.translation.k_tracks.to_string()),
            ("translation.max_iterations", self.translation.max_iterations.to_string()),
            ("ba.max_iterations", self.ba.max_iterations.to_string()),
            ("ba.function_tolerance", self.ba.function_tolerance.to_string()),
            ("ba.parameter_tolerance", self.ba.parameter_tolerance.to_string()),
            ("ba.huber_px", self.ba.huber_px.to_string()),
            ("ba.damping_init", self.ba.damping_init.to_string()),
            ("ba.refine_intrinsics", self.ba.refine_intrinsics.to_string()),
            ("ba.intrinsics_min_rotation_deg", self.ba.intrinsics_min_rotation.to_degrees().to_string()),
            ("ba.outlier_px", self.ba.outlier_px.to_string()),
            ("refine.trigger_px", self.refine_trigger_px.to_string()),
            ("path.tracks", path_entry(&self.paths.tracks)),
            ("path.images", path_entry(&self.paths.images)),
            ("path.times", path_entry(&self.paths.times)),
            ("path.intrinsics", path_entry(&self.paths.intrinsics)),
            ("path.out", path_entry(&self.paths.out)),
            ("path.ground_truth", path_entry(&self.paths.ground_truth)),
            ("path.ground_truth_points", path_entry(&self.paths.ground_truth_points)),
        ];
        e.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Cross-field checks, run after all keys are set.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = &self.viewgraph;
        if v.w_min > v.w_max {
            return Err(invalid("window.min", &v.w_min.to_string(), "exceeds window.max"));
        }
        if v.overlap >= v.w_max {
            return Err(invalid("window.overlap", &v.overlap.to_string(), "must be smaller than window.max"));
        }
        Ok(())
    }

    /// Applies a `key = value` document on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: n + 1, message: "expected key = value".into() });
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey(key.into()));
            }
            self.set(key, value)?;
        }
        self.validate()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Seeds every randomized stage from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn ransac(&self) -> RansacConfig {
        RansacConfig { seed: self.seed, ..self.viewgraph.ransac }
    }
}

/// Camera description read from a `key = value` file: `focal`, `cx`, `cy`
/// required; `r`, `width`, `height` optional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntrinsicsFile {
    pub intrinsics: CameraIntrinsics,
    pub image_size: Option<(usize, usize)>,
}

pub fn parse_intrinsics(text: &str) -> Result<IntrinsicsFile, ConfigError> {
    let mut focal = None;
    let mut cx = None;
    let mut cy = None;
    let mut r = 0.0;
    let mut width = None;
    let mut height = None;
    let mut seen = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: n + 1, message: "expected key = value".into() });
        };
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::DuplicateKey(key.into()));
        }
        match key {
            "focal" => focal = Some(positive(key, value)?),
            "cx" => cx = Some(parse_f64(key, value)?),
            "cy" => cy = Some(parse_f64(key, value)?),
            "r" => r = parse_f64(key, value)?,
            "width" => width = Some(count(key, value, 1)?),
            "height" => height = Some(count(key, value, 1)?),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
    }
    let focal = focal.ok_or_else(|| ConfigError::MissingKey("focal".into()))?;
    let cx = cx.ok_or_else(|| ConfigError::MissingKey("cx".into()))?;
    let cy = cy.ok_or_else(|| ConfigError::MissingKey("cy".into()))?;
    let image_size = match (width, height) {
        (Some(w), Some(h)) => Some((w, h)),
        (None, None) => None,
        _ => return Err(ConfigError::MissingKey(if width.is_none() { "width" } else { "height" }.into())),
    };
    let intrinsics = CameraIntrinsics::new(focal, cx, cy, r).map_err(|e| invalid("focal", &focal.to_string(), e.to_string()))?;
    Ok(IntrinsicsFile { intrinsics, image_size })
}

pub fn write_intrinsics(file: &IntrinsicsFile) -> String {
    let i = &file.intrinsics;
    let mut out = format!("focal = {}\ncx = {}\ncy = {}\nr = {}\n", i.focal, i.principal_point.x, i.principal_point.y, i.distortion_r);
    if let Some((w, h)) = file.image_size {
        out.push_str(&format!("width = {w}\nheight = {h}\n"));
    }
    out
}
