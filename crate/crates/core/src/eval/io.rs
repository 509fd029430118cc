use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Point3, Vector3};

use super::EvalError;
use crate::bundle::{format_significant, TumPose};
use crate::geometry::rotation;
use crate::tracking::TrackId;

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(n, line)| {
        let line = line.trim();
        (!line.is_empty() && !line.starts_with('#')).then(|| (n + 1, line.split_ascii_whitespace().collect()))
    })
}

fn numbers(line: usize, fields: &[&str], expected: usize) -> Result<Vec<f64>, EvalError> {
    if fields.len() != expected {
        return Err(EvalError::Format { line, message: format!("expected {expected} fields, got {}", fields.len()) });
    }
    fields
        .iter()
        .map(|f| match f.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(EvalError::Format { line, message: format!("bad number {f:?}") }),
        })
        .collect()
}

/// `timestamp tx ty tz qx qy qz qw` lines.
pub fn parse_tum(text: &str) -> Result<Vec<TumPose>, EvalError> {
    data_lines(text)
        .map(|(line, fields)| {
            let v = numbers(line, &fields, 8)?;
            let orientation = rotation::from_quaternion(v[7], v[4], v[5], v[6])
                .ok_or(EvalError::Format { line, message: "zero quaternion".into() })?;
            Ok(TumPose { timestamp: v[0], position: Vector3::new(v[1], v[2], v[3]), orientation })
        })
        .collect()
}

/// KITTI odometry poses: 12 numbers per line, the row-major camera-to-world
/// `[R | t]`. Timestamps come from `times` when given, otherwise the line
/// index.
pub fn parse_kitti(text: &str, times: Option<&[f64]>) -> Result<Vec<TumPose>, EvalError> {
    let mut out = Vec::new();
    for (k, (line, fields)) in data_lines(text).enumerate() {
        let v = numbers(line, &fields, 12)?;
        let m = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let timestamp = match times {
            Some(t) => *t.get(k).ok_or(EvalError::Format { line, message: "more poses than timestamps".into() })?,
            None => k as f64,
        };
        out.push(TumPose {
            timestamp,
            position: Vector3::new(v[3], v[7], v[11]),
            orientation: rotation::project_to_so3(&m),
        });
    }
    Ok(out)
}

/// `track_id x y z` lines.
pub fn parse_gt_points(text: &str) -> Result<BTreeMap<TrackId, Point3<f64>>, EvalError> {
    let mut out = BTreeMap::new();
    for (line, fields) in data_lines(text) {
        if fields.len() != 4 {
            return Err(EvalError::Format { line, message: format!("expected 4 fields, got {}", fields.len()) });
        }
        let id: TrackId =
            fields[0].parse().map_err(|_| EvalError::Format { line, message: format!("bad track id {:?}", fields[0]) })?;
        let v = numbers(line, &fields[1..], 3)?;
        if out.insert(id, Point3::new(v[0], v[1], v[2])).is_some() {
            return Err(EvalError::Format { line, message: format!("duplicate track id {id}") });
        }
    }
    Ok(out)
}

pub fn write_gt_points(points: &BTreeMap<TrackId, Point3<f64>>) -> String {
    let mut out = String::new();
    for (id, p) in points {
        let _ = writeln!(out, "{id} {} {} {}", format_significant(p.x, 9), format_significant(p.y, 9), format_significant(p.z, 9));
    }
    out
}
