use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{Point3, Unit, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::EvalError;
use crate::bundle::TumPose;
use crate::geometry::{project, rotation, CameraIntrinsics, Pose};
use crate::tracking::{GrayImage, TrackId, TrackTable};

/// Rectangular textured plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub center: Vector3<f64>,
    pub normal: Unit<Vector3<f64>>,
    /// Side lengths along the in-plane axes (meters).
    pub size: (f64, f64),
    pub point_count: usize,
}

impl Plane {
    /// In-plane unit axes.
    pub fn axes(&self) -> (Vector3<f64>, Vector3<f64>) {
        let n = self.normal.into_inner();
        let up = if n.y.abs() < 0.9 { Vector3::y() } else { Vector3::x() };
        let u = up.cross(&n).normalize();
        (u, n.cross(&u))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub planes: Vec<Plane>,
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

/// Depths of the replica planes beyond the end of the path (meters).
const REPLICA_DEPTHS: [f64; 5] = [2.0, 4.0, 6.0, 8.0, 10.0];
const REPLICA_SIZES: [f64; 5] = [3.2, 4.0, 5.12, 5.12, 5.12];
const REPLICA_OFFSETS: [(f64, f64); 5] = [(0.0, 0.0), (-1.0, 0.5), (1.0, -0.5), (-1.5, 0.3), (1.5, -0.3)];

impl SyntheticScene {
    /// Five fronto-parallel planes, 400 points each, placed beyond the end
    /// of the profile's path.
    pub fn replica(profile: &MotionProfile, seed: u64) -> Self {
        let base = match profile.kind {
            ProfileKind::Frontal | ProfileKind::Egomotion => profile.length,
            ProfileKind::LeftRight => 0.0,
        };
        let planes = (0..5)
            .map(|k| Plane {
                center: Vector3::new(REPLICA_OFFSETS[k].0, REPLICA_OFFSETS[k].1, base + REPLICA_DEPTHS[k]),
                normal: Unit::new_normalize(Vector3::new(0.0, 0.0, -1.0)),
                size: (REPLICA_SIZES[k], REPLICA_SIZES[k]),
                point_count: 400,
            })
            .collect();
        Self {
            planes,
            intrinsics: CameraIntrinsics::new(500.0, 320.0, 240.0, 0.0).expect("valid intrinsics"),
            width: 640,
            height: 480,
            seed,
        }
    }

    /// Uniform samples on every plane, in plane order.
    pub fn sample_points(&self) -> Vec<Point3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::new();
        for plane in &self.planes {
            let (u, v) = plane.axes();
            for _ in 0..plane.point_count {
                let a = rng.random_range(-0.5..0.5) * plane.size.0;
                let b = rng.random_range(-0.5..0.5) * plane.size.1;
                out.push(Point3::from(plane.center + u * a + v * b));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileKind {
    Frontal,
    LeftRight,
    Egomotion,
}

impl FromStr for ProfileKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "frontal" => Ok(Self::Frontal),
            "left-right" | "leftright" => Ok(Self::LeftRight),
            "egomotion" => Ok(Self::Egomotion),
            other => Err(format!("unknown profile {other:?} (expected frontal, left-right or egomotion)")),
        }
    }
}

impl ProfileKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Frontal => "frontal",
            Self::LeftRight => "left-right",
            Self::Egomotion => "egomotion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionProfile {
    pub kind: ProfileKind,
    /// Path length (meters).
    pub length: f64,
    pub fps: f64,
    /// Nominal walking speed, used for the default frame count (m/s).
    pub speed: f64,
    /// Peak head yaw of the egomotion scan (radians).
    pub yaw_amplitude: f64,
    /// Head scan frequency (Hz).
    pub yaw_frequency: f64,
    /// Standard deviation of the roll/pitch jitter knots (radians).
    pub jitter: f64,
    /// Spacing of the jitter knots (seconds).
    pub jitter_interval: f64,
    pub seed: u64,
}

impl MotionProfile {
    pub fn new(kind: ProfileKind, length: f64) -> Self {
        Self {
            kind,
            length,
            fps: 30.0,
            speed: 1.0,
            yaw_amplitude: 20f64.to_radians(),
            yaw_frequency: 0.5,
            jitter: 2f64.to_radians(),
            jitter_interval: 1.0,
            seed: 0,
        }
    }

    /// Frames needed to cover the path at the nominal speed.
    pub fn default_frames(&self) -> usize {
        ((self.length / self.speed * self.fps).round() as usize).max(2)
    }

    fn knots(&self, n_frames: usize) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6a09_e667_f3bc_c908);
        let normal = Normal::new(0.0, self.jitter.max(0.0) + f64::MIN_POSITIVE).expect("finite sigma");
        let duration = n_frames as f64 / self.fps;
        let count = (duration / self.jitter_interval).ceil() as usize + 2;
        (0..count).map(|_| (normal.sample(&mut rng), normal.sample(&mut rng))).collect()
    }

    /// Ground-truth pose of every frame.
    pub fn poses(&self, n_frames: usize) -> Vec<Pose> {
        let knots = self.knots(n_frames);
        (0..n_frames)
            .map(|k| {
                let s = if n_frames > 1 { self.length * k as f64 / (n_frames - 1) as f64 } else { 0.0 };
                let t = k as f64 / self.fps;
                match self.kind {
                    ProfileKind::Frontal => Pose::new(rotation::Rotation::identity(), Vector3::new(0.0, 0.0, s)),
                    ProfileKind::LeftRight => {
                        Pose::new(rotation::Rotation::identity(), Vector3::new(s - 0.5 * self.length, 0.0, 0.0))
                    }
                    ProfileKind::Egomotion => {
                        let yaw = self.yaw_amplitude * (2.0 * PI * self.yaw_frequency * t).sin();
                        let x = t / self.jitter_interval;
                        let i = x.floor() as usize;
                        let w = 0.5 - 0.5 * ((x - i as f64) * PI).cos();
                        let pitch = knots[i].0 * (1.0 - w) + knots[i + 1].0 * w;
                        let roll = knots[i].1 * (1.0 - w) + knots[i + 1].1 * w;
                        let cam_to_world = rotation::rot_y(yaw) * rotation::rot_x(pitch) * rotation::rot_z(roll);
                        Pose::new(cam_to_world.inverse(), Vector3::new(0.0, 0.0, s))
                    }
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOptions {
    /// Standard deviation of the isotropic pixel noise.
    pub noise_px: f64,
    pub seed: u64,
    /// Frames in which nothing is observed.
    pub gap: Option<Range<usize>>,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self { noise_px: 0.0, seed: 0, gap: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub table: TrackTable,
    pub timestamps: Vec<f64>,
    pub gt_poses: Vec<Pose>,
    /// Ground-truth point of every track.
    pub gt_points: BTreeMap<TrackId, Point3<f64>>,
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
}

impl SyntheticSequence {
    pub fn gt_trajectory(&self) -> Vec<TumPose> {
        self.gt_poses
            .iter()
            .zip(&self.timestamps)
            .map(|(p, t)| TumPose { timestamp: *t, position: p.center, orientation: p.rotation.inverse() })
            .collect()
    }
}

/// Projects the scene through the profile; each contiguous visibility run of
/// a point becomes one track.
pub fn generate_sequence(
    scene: &SyntheticScene,
    profile: &MotionProfile,
    n_frames: usize,
    opts: &GeneratorOptions,
) -> Result<SyntheticSequence, EvalError> {
    if n_frames < 2 {
        return Err(EvalError::InvalidInput(format!("need at least 2 frames, got {n_frames}")));
    }
    if !(opts.noise_px >= 0.0 && opts.noise_px.is_finite()) {
        return Err(EvalError::InvalidInput(format!("noise must be non-negative, got {}", opts.noise_px)));
    }
    let poses = profile.poses(n_frames);
    let points = scene.sample_points();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = Normal::new(0.0, opts.noise_px + f64::MIN_POSITIVE).expect("finite sigma");
    let (w, h) = (scene.width as f64, scene.height as f64);
    let mut table = TrackTable::new();
    let mut gt_points = BTreeMap::new();
    for x in &points {
        let mut run: Vec<(usize, Vector2<f64>)> = Vec::new();
        let flush = |run: &mut Vec<(usize, Vector2<f64>)>, table: &mut TrackTable, gt: &mut BTreeMap<TrackId, Point3<f64>>| {
            if run.len() >= 2 {
                let id = table.spawn(run[0].0, run[0].1);
                for (f, px) in &run[1..] {
                    table.push(id, *f, *px).expect("contiguous run");
                }
                gt.insert(id, *x);
            }
            run.clear();
        };
        for (f, pose) in poses.iter().enumerate() {
            let in_gap = opts.gap.as_ref().is_some_and(|g| g.contains(&f));
            let inside = |p: &Vector2<f64>| p.x >= 0.0 && p.y >= 0.0 && p.x < w && p.y < h;
            let px = project(&scene.intrinsics, pose, x).ok().filter(inside).map(|p| {
                if opts.noise_px > 0.0 {
                    p + Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng))
                } else {
                    p
                }
            });
            match (in_gap, px) {
                (false, Some(p)) if inside(&p) => run.push((f, p)),
                _ => flush(&mut run, &mut table, &mut gt_points),
            }
        }
        flush(&mut run, &mut table, &mut gt_points);
    }
    if table.is_empty() {
        return Err(EvalError::EmptyVisibility);
    }
    for t in table.tracks.values_mut() {
        t.alive = false;
    }
    Ok(SyntheticSequence {
        table,
        timestamps: (0..n_frames).map(|k| k as f64 / profile.fps).collect(),
        gt_poses: poses,
        gt_points,
        intrinsics: scene.intrinsics,
        width: scene.width,
        height: scene.height,
    })
}

/// Mean rotation-compensated ray angle over consecutive frame pairs
/// (radians), from the ground truth of the observations.
pub fn mean_pair_parallax(seq: &SyntheticSequence) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (id, track) in &seq.table.tracks {
        let x = seq.gt_points[id];
        for pair in track.observations.windows(2) {
            let (a, b) = (&seq.gt_poses[pair[0].frame], &seq.gt_poses[pair[1].frame]);
            let ra = (x.coords - a.center).normalize();
            let rb = (x.coords - b.center).normalize();
            sum += ra.cross(&rb).norm().atan2(ra.dot(&rb));
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn texture(u: f64, v: f64, phase: f64) -> f64 {
    let tau = 2.0 * PI;
    128.0
        + 45.0 * (tau * u / 0.23 + phase).sin() * (tau * v / 0.17 - phase).sin()
        + 30.0 * (tau * (u + 0.6 * v) / 0.41 + 2.0 * phase).sin()
        + 20.0 * (tau * (v - 0.3 * u) / 0.09).sin().signum() * (tau * u / 0.13).sin()
}

/// Gray raster of the scene seen from `pose`; background is black.
pub fn render_frame(scene: &SyntheticScene, pose: &Pose) -> GrayImage {
    let intr = &scene.intrinsics;
    let cam_to_world = pose.rotation.inverse();
    let axes: Vec<_> = scene.planes.iter().map(|p| p.axes()).collect();
    GrayImage::from_fn(scene.width, scene.height, |x, y| {
        let measured = intr.normalize(&Vector2::new(x as f64 + 0.5, y as f64 + 0.5));
        let ideal = measured * (1.0 + intr.distortion_r * measured.norm_squared());
        let dir = cam_to_world * Vector3::new(ideal.x, ideal.y, 1.0);
        let mut best: Option<(f64, f64)> = None;
        for (k, plane) in scene.planes.iter().enumerate() {
            let n = plane.normal.into_inner();
            let denom = n.dot(&dir);
            if denom.abs() < 1e-12 {
                continue;
            }
            let t = n.dot(&(plane.center - pose.center)) / denom;
            if t <= 0.0 || best.is_some_and(|(bt, _)| bt <= t) {
                continue;
            }
            let hit = pose.center + dir * t - plane.center;
            let (u, v) = (hit.dot(&axes[k].0), hit.dot(&axes[k].1));
            if u.abs() <= 0.5 * plane.size.0 && v.abs() <= 0.5 * plane.size.1 {
                best = Some((t, texture(u, v, k as f64 * 1.3)));
            }
        }
        best.map_or(0, |(_, g)| g.round().clamp(0.0, 255.0) as u8)
    })
}
