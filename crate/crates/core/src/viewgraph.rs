//! Per-window view graph: keyframes, sequential edges and local loop
//! closures.

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::Vector2;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{estimate_relative_pose, rotation, CameraIntrinsics, Correspondence, RansacConfig, RelativePose};
use crate::tracking::{TrackId, TrackTable};

#[derive(Debug, Error)]
pub enum ViewGraphError {
    #[error("window needs at least {min} keyframes, got {got}")]
    InsufficientKeyframes { got: usize, min: usize },
    #[error("view graph is disconnected; split before keyframe position {split_at}")]
    DisconnectedGraph { split_at: usize },
    #[error("keyframes {0} and {1} share no tracks")]
    NoSharedTracks(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub kf_id: usize,
    pub frame_index: usize,
    pub timestamp: f64,
    /// Pixel observations sorted by track id.
    pub observations: Vec<(TrackId, Vector2<f64>)>,
}

impl Keyframe {
    pub fn from_table(kf_id: usize, frame_index: usize, timestamp: f64, table: &TrackTable) -> Self {
        Self { kf_id, frame_index, timestamp, observations: table.observations_at(frame_index) }
    }

    pub fn observation(&self, track: TrackId) -> Option<Vector2<f64>> {
        self.observations
            .binary_search_by_key(&track, |(id, _)| *id)
            .ok()
            .map(|k| self.observations[k].1)
    }
}

/// Number of tracks observed in both keyframes.
pub fn shared_track_count(a: &Keyframe, b: &Keyframe) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.observations.len() && j < b.observations.len() {
        match a.observations[i].0.cmp(&b.observations[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Distortion-corrected normalized correspondences over shared tracks.
pub fn make_correspondences(
    a: &Keyframe,
    b: &Keyframe,
    intr: &CameraIntrinsics,
) -> Result<Vec<(TrackId, Correspondence)>, ViewGraphError> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.observations.len() && j < b.observations.len() {
        let (ia, pa) = a.observations[i];
        let (ib, pb) = b.observations[j];
        match ia.cmp(&ib) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push((ia, Correspondence::new(intr.correct(&pa), intr.correct(&pb))));
                i += 1;
                j += 1;
            }
        }
    }
    if out.is_empty() {
        return Err(ViewGraphError::NoSharedTracks(a.kf_id, b.kf_id));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Sequential,
    LoopClosure,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Sequential => "sequential",
            EdgeKind::LoopClosure => "loop",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewGraphEdge {
    /// Positions of the endpoints inside the window, `i < j`.
    pub i: usize,
    pub j: usize,
    pub rel: RelativePose,
    pub kind: EdgeKind,
    pub translation_reliable: bool,
    pub shared_tracks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewGraphConfig {
    pub w_min: usize,
    pub w_max: usize,
    pub overlap: usize,
    /// Recent keyframes scanned for loop closures.
    pub loop_recent: usize,
    pub min_shared: usize,
    pub loop_min_ratio: f64,
    pub loop_closure: bool,
    pub ransac: RansacConfig,
}

impl Default for ViewGraphConfig {
    fn default() -> Self {
        Self {
            w_min: 10,
            w_max: 30,
            overlap: 0,
            loop_recent: 5,
            min_shared: 20,
            loop_min_ratio: 0.5,
            loop_closure: true,
            ransac: RansacConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Window {
    pub window_id: usize,
    pub keyframes: Vec<Keyframe>,
    pub edges: Vec<ViewGraphEdge>,
    pub overlap_with_prev: usize,
}

/// Per-edge RANSAC seed, independent of evaluation order.
pub fn edge_seed(global: u64, kf_i: usize, kf_j: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(global) ^ kf_i as u64) ^ (kf_j as u64).rotate_left(32))
}

fn estimate_edge(
    a: &Keyframe,
    b: &Keyframe,
    intr: &CameraIntrinsics,
    cfg: &ViewGraphConfig,
) -> Option<(RelativePose, usize)> {
    let shared = shared_track_count(a, b);
    if shared < cfg.min_shared.max(8) {
        return None;
    }
    let corrs: Vec<Correspondence> = make_correspondences(a, b, intr).ok()?.into_iter().map(|(_, c)| c).collect();
    let ransac = RansacConfig { seed: edge_seed(cfg.ransac.seed, a.kf_id, b.kf_id), ..cfg.ransac };
    estimate_relative_pose(&corrs, &ransac).ok().map(|rel| (rel, shared))
}

/// Loop-closure edges from the newest keyframe of `recent_and_new` (last
/// element) to the non-adjacent keyframes before it.
pub fn propose_loop_edges(
    new_kf: &Keyframe,
    new_pos: usize,
    recent: &[(usize, &Keyframe)],
    intr: &CameraIntrinsics,
    cfg: &ViewGraphConfig,
) -> Vec<ViewGraphEdge> {
    recent
        .par_iter()
        .filter(|(pos, _)| *pos + 1 < new_pos)
        .filter_map(|(pos, kf)| {
            let (rel, shared) = estimate_edge(kf, new_kf, intr, cfg)?;
            (rel.inlier_ratio >= cfg.loop_min_ratio).then_some(ViewGraphEdge {
                i: *pos,
                j: new_pos,
                translation_reliable: rel.translation_reliable,
                rel,
                kind: EdgeKind::LoopClosure,
                shared_tracks: shared,
            })
        })
        .collect()
}

fn components(n: usize, edges: &[ViewGraphEdge]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for e in edges {
        let (a, b) = (find(&mut parent, e.i), find(&mut parent, e.j));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    (0..n).map(|x| find(&mut parent, x)).collect()
}

pub fn build_window(
    window_id: usize,
    keyframes: Vec<Keyframe>,
    overlap_with_prev: usize,
    intr: &CameraIntrinsics,
    cfg: &ViewGraphConfig,
) -> Result<Window, ViewGraphError> {
    let w = keyframes.len();
    if w < 2 || w > cfg.w_max {
        return Err(ViewGraphError::InsufficientKeyframes { got: w, min: 2.max(cfg.w_min.min(w.max(2))) });
    }
    let sequential: Vec<ViewGraphEdge> = (1..w)
        .into_par_iter()
        .filter_map(|j| {
            let (rel, shared) = estimate_edge(&keyframes[j - 1], &keyframes[j], intr, cfg)?;
            Some(ViewGraphEdge {
                i: j - 1,
                j,
                translation_reliable: rel.translation_reliable,
                rel,
                kind: EdgeKind::Sequential,
                shared_tracks: shared,
            })
        })
        .collect();
    let mut edges = sequential;
    if cfg.loop_closure && cfg.loop_recent > 1 {
        let loops: Vec<Vec<ViewGraphEdge>> = (2..w)
            .into_par_iter()
            .map(|j| {
                let start = j.saturating_sub(cfg.loop_recent);
                let recent: Vec<(usize, &Keyframe)> = (start..j).map(|p| (p, &keyframes[p])).collect();
                propose_loop_edges(&keyframes[j], j, &recent, intr, cfg)
            })
            .collect();
        edges.extend(loops.into_iter().flatten());
    }
    edges.sort_by_key(|e| (e.i, e.j));
    edges.dedup_by_key(|e| (e.i, e.j));

    let comp = components(w, &edges);
    if let Some(split_at) = (1..w).find(|&k| comp[k] != comp[0]) {
        // Prefer the weakest sequential link before the first unreachable keyframe.
        let weakest = (1..=split_at)
            .filter(|&k| !edges.iter().any(|e| e.kind == EdgeKind::Sequential && e.j == k))
            .min_by_key(|&k| shared_track_count(&keyframes[k - 1], &keyframes[k]))
            .unwrap_or(split_at);
        return Err(ViewGraphError::DisconnectedGraph { split_at: weakest });
    }
    Ok(Window { window_id, keyframes, edges, overlap_with_prev })
}

/// Keyframe index ranges of consecutive windows.
///
/// Windows hold at most `w_max` keyframes and, when the sequence allows it,
/// at least `w_min`; consecutive windows share `overlap` keyframes.
pub fn plan_windows(n_keyframes: usize, cfg: &ViewGraphConfig) -> Vec<Range<usize>> {
    let w_max = cfg.w_max.max(1);
    let overlap = cfg.overlap.min(w_max.saturating_sub(1));
    if n_keyframes == 0 {
        return Vec::new();
    }
    if n_keyframes <= w_max {
        return vec![0..n_keyframes];
    }
    let stride = w_max - overlap;
    let n_windows = (n_keyframes - overlap).div_ceil(stride);
    // Spread keyframes evenly so the last window is not a runt.
    let fresh_total = n_keyframes - overlap;
    let mut out = Vec::with_capacity(n_windows);
    let mut start = 0;
    for k in 0..n_windows {
        let fresh = fresh_total / n_windows + usize::from(k < fresh_total % n_windows);
        let end = (start + fresh + overlap).min(n_keyframes);
        out.push(start..end);
        start = end - overlap;
    }
    out
}

/// `edge kf_i kf_j kind inliers qw qx qy qz tx ty tz` per line.
pub fn dump_text(window: &Window) -> String {
    let mut out = String::new();
    for e in &window.edges {
        let [qw, qx, qy, qz] = rotation::to_quaternion(&e.rel.rotation);
        let t = e.rel.direction;
        let _ = writeln!(
            out,
            "edge {} {} {} {} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            window.keyframes[e.i].kf_id,
            window.keyframes[e.j].kf_id,
            e.kind.as_str(),
            e.rel.inlier_count,
            qw,
            qx,
            qy,
            qz,
            t.x,
            t.y,
            t.z
        );
    }
    out
}
