use std::fmt::Write as _;

use nalgebra::{Point3, Vector3};

use super::map::GlobalMap;
use crate::geometry::{rotation, Rotation};

/// Camera pose in TUM convention: camera position and camera-to-world
/// orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TumPose {
    pub timestamp: f64,
    pub position: Vector3<f64>,
    pub orientation: Rotation,
}

/// Decimal rendering with `digits` significant digits, trailing zeros trimmed.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0".into() } else { format!("{x}") };
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-5..15).contains(&exp) {
        return format!("{:.*e}", digits.saturating_sub(1), x);
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    let mut s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.truncate(s.trim_end_matches('0').trim_end_matches('.').len());
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// Keyframe trajectory of the map in frame order, one entry per keyframe.
pub fn trajectory(map: &GlobalMap) -> Vec<TumPose> {
    let mut out: Vec<(usize, TumPose)> = map
        .keyframes
        .iter()
        .map(|k| {
            (
                k.info.frame_index,
                TumPose { timestamp: k.info.timestamp, position: k.pose.center, orientation: k.pose.rotation.inverse() },
            )
        })
        .collect();
    out.sort_by_key(|(f, _)| *f);
    out.into_iter().map(|(_, p)| p).collect()
}

/// `timestamp tx ty tz qx qy qz qw`, 9 significant digits.
pub fn write_tum(poses: &[TumPose]) -> String {
    let mut out = String::new();
    for p in poses {
        let [qw, qx, qy, qz] = rotation::to_quaternion(&p.orientation);
        let fields = [p.timestamp, p.position.x, p.position.y, p.position.z, qx, qy, qz, qw];
        let line: Vec<String> = fields.iter().map(|v| format_significant(*v, 9)).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// ASCII PLY with `x y z` float vertices.
pub fn write_ply(points: &[Point3<f64>]) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    );
    for p in points {
        let _ = writeln!(out, "{} {} {}", format_significant(p.x, 9), format_significant(p.y, 9), format_significant(p.z, 9));
    }
    out
}
