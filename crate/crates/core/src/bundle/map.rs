use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Point3, Vector2};

use super::reprojection::reprojection_residual;
use super::window::{KeyframeInfo, WindowEstimate};
use crate::geometry::{triangulate_linear, umeyama_similarity, CameraIntrinsics, Pose, Similarity};
use crate::tracking::TrackId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapKeyframe {
    pub info: KeyframeInfo,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    /// Index into `GlobalMap::windows` of the window that introduced it.
    pub window: usize,
    pub segment: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPoint {
    pub position: Point3<f64>,
    pub segment: usize,
    /// Index into `GlobalMap::windows` of the window that first placed it.
    pub owner_window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub window_id: usize,
    pub segment: usize,
    /// Maps the window's own gauge into the map.
    pub similarity: Similarity,
    /// Map keyframe indices viewed by the window.
    pub keyframes: Vec<usize>,
    pub rmse_px: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BreakReason {
    NoAnchors,
    DegenerateAnchors,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BreakMarker {
    /// First frame of the new segment.
    pub frame_index: usize,
    pub reason: BreakReason,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MergeOutcome {
    First,
    Anchored { anchors: usize, similarity: Similarity },
    NewSegment(BreakReason),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalMap {
    pub keyframes: Vec<MapKeyframe>,
    pub points: BTreeMap<TrackId, MapPoint>,
    /// Every observation merged so far: `(map keyframe, pixel)` per track.
    pub observations: BTreeMap<TrackId, Vec<(usize, Vector2<f64>)>>,
    /// Tracks with observations but no point yet.
    pub deferred: BTreeSet<TrackId>,
    pub windows: Vec<WindowRecord>,
    pub breaks: Vec<BreakMarker>,
    pub parallax_min: f64,
}

impl GlobalMap {
    pub fn new(parallax_min: f64) -> Self {
        Self { parallax_min, ..Default::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn segment_count(&self) -> usize {
        self.keyframes.last().map_or(0, |k| k.segment + 1)
    }

    fn current_segment(&self) -> usize {
        self.keyframes.last().map_or(0, |k| k.segment)
    }

    /// Observations of `track` from keyframes of `segment`.
    pub fn segment_views(&self, track: TrackId, segment: usize) -> Vec<(usize, Vector2<f64>)> {
        self.observations
            .get(&track)
            .map(|v| v.iter().filter(|(k, _)| self.keyframes[*k].segment == segment).copied().collect())
            .unwrap_or_default()
    }

    /// Multi-view triangulation of a track inside one segment.
    pub fn triangulate_track(&self, track: TrackId, segment: usize) -> Option<Point3<f64>> {
        let views = self.segment_views(track, segment);
        if views.len() < 2 {
            return None;
        }
        let poses: Vec<Pose> = views.iter().map(|(k, _)| self.keyframes[*k].pose).collect();
        let xs: Vec<Vector2<f64>> = views.iter().map(|(k, px)| self.keyframes[*k].intrinsics.correct(px)).collect();
        triangulate_linear(&poses, &xs, self.parallax_min).ok()
    }

    /// Per-coordinate reprojection RMSE of one point over its segment views.
    pub fn point_rmse(&self, track: TrackId) -> Option<f64> {
        let p = self.points.get(&track)?;
        let views = self.segment_views(track, p.segment);
        let mut sum = 0.0;
        for (k, px) in &views {
            let kf = &self.keyframes[*k];
            sum += reprojection_residual(&kf.intrinsics, &kf.pose, &p.position, px)?.norm_squared();
        }
        Some((sum / (2 * views.len().max(1)) as f64).sqrt())
    }

    fn find_keyframe(&self, frame_index: usize, segment: usize) -> Option<usize> {
        self.keyframes.iter().rposition(|k| k.info.frame_index == frame_index && k.segment == segment)
    }
}

fn trimmed_umeyama(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Result<(Similarity, usize), BreakReason> {
    let mut sim = umeyama_similarity(src, dst).map_err(|_| BreakReason::DegenerateAnchors)?;
    let res: Vec<f64> = src.iter().zip(dst).map(|(s, d)| (sim.apply(s) - d).norm()).collect();
    let mut sorted = res.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let cut = 3.0 * median + 1e-12;
    let keep: Vec<usize> = (0..res.len()).filter(|&k| res[k] <= cut).collect();
    if keep.len() < res.len() && keep.len() >= 3 {
        let s: Vec<_> = keep.iter().map(|&k| src[k]).collect();
        let d: Vec<_> = keep.iter().map(|&k| dst[k]).collect();
        if let Ok(refit) = umeyama_similarity(&s, &d) {
            sim = refit;
        }
    }
    Ok((sim, keep.len()))
}

/// Brings `est` into the map's gauge and merges its cameras and points.
pub fn merge_window(map: &mut GlobalMap, est: &WindowEstimate) -> MergeOutcome {
    let window_index = map.windows.len();
    let mut segment = map.current_segment();
    let (similarity, outcome) = if map.is_empty() {
        (Similarity::identity(), MergeOutcome::First)
    } else {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for (c, info) in est.keyframes.iter().enumerate() {
            if let Some(k) = map.find_keyframe(info.frame_index, segment) {
                src.push(Point3::from(est.poses[c].center));
                dst.push(Point3::from(map.keyframes[k].pose.center));
            }
        }
        for (track, x) in est.point_ids.iter().zip(&est.points) {
            if let Some(p) = map.points.get(track).filter(|p| p.segment == segment) {
                src.push(*x);
                dst.push(p.position);
            }
        }
        let fit = if src.len() < 3 { Err(BreakReason::NoAnchors) } else { trimmed_umeyama(&src, &dst) };
        match fit {
            Ok((sim, anchors)) => (sim, MergeOutcome::Anchored { anchors, similarity: sim }),
            Err(reason) => {
                segment += 1;
                map.breaks.push(BreakMarker { frame_index: est.keyframes[0].frame_index, reason });
                (Similarity::identity(), MergeOutcome::NewSegment(reason))
            }
        }
    };

    let rinv = similarity.rotation.inverse();
    let mut cam_to_map = Vec::with_capacity(est.poses.len());
    for (c, info) in est.keyframes.iter().enumerate() {
        let k = match map.find_keyframe(info.frame_index, segment) {
            Some(k) => k,
            None => {
                let pose = Pose::new(est.poses[c].rotation * rinv, similarity.apply_vec(&est.poses[c].center));
                map.keyframes.push(MapKeyframe {
                    info: *info,
                    pose,
                    intrinsics: est.intrinsics,
                    window: window_index,
                    segment,
                });
                map.keyframes.len() - 1
            }
        };
        cam_to_map.push(k);
    }

    let add_obs = |map: &mut GlobalMap, track: TrackId, cam: usize, px: Vector2<f64>| {
        let k = cam_to_map[cam];
        let list = map.observations.entry(track).or_default();
        if !list.iter().any(|(kk, _)| *kk == k) {
            list.push((k, px));
        }
    };
    for o in &est.observations {
        add_obs(map, est.point_ids[o.point], o.camera, o.pixel);
    }
    for d in &est.deferred {
        for (cam, px) in &d.views {
            add_obs(map, d.track, *cam, *px);
        }
    }

    for (track, x) in est.point_ids.iter().zip(&est.points) {
        match map.points.get(track).filter(|p| p.segment == segment).copied() {
            Some(existing) => {
                if let Some(fused) = map.triangulate_track(*track, segment) {
                    map.points.insert(*track, MapPoint { position: fused, ..existing });
                }
            }
            None => {
                map.points.insert(
                    *track,
                    MapPoint { position: similarity.apply(x), segment, owner_window: window_index },
                );
                map.deferred.remove(track);
            }
        }
    }

    map.deferred.extend(est.deferred.iter().map(|d| d.track).filter(|t| !map.points.contains_key(t)));
    let pending: Vec<TrackId> = map.deferred.iter().copied().collect();
    for track in pending {
        if let Some(x) = map.triangulate_track(track, segment) {
            map.points.insert(track, MapPoint { position: x, segment, owner_window: window_index });
            map.deferred.remove(&track);
        }
    }

    map.windows.push(WindowRecord {
        window_id: est.window_id,
        segment,
        similarity,
        keyframes: cam_to_map,
        rmse_px: est.rmse(),
    });
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::testutil::{arc_scene, estimate};
    use crate::bundle::{global_refine, BaConfig, DeferredTrack};
    use crate::geometry::{project, rotation};
    use nalgebra::Vector3;

    fn split(est: &WindowEstimate, cams: std::ops::Range<usize>, window_id: usize) -> WindowEstimate {
        let mut w = est.clone();
        w.window_id = window_id;
        w.keyframes = est.keyframes[cams.clone()].to_vec();
        w.poses = est.poses[cams.clone()].to_vec();
        w.observations = est
            .observations
            .iter()
            .filter(|o| cams.contains(&o.camera))
            .map(|o| WindowObservation { camera: o.camera - cams.start, ..*o })
            .collect();
        w
    }

    fn regauge(est: &mut WindowEstimate, sim: &Similarity) {
        let rinv = sim.rotation.inverse();
        for p in &mut est.poses {
            *p = Pose::new(p.rotation * rinv, sim.apply_vec(&p.center));
        }
        for x in &mut est.points {
            *x = sim.apply(x);
        }
    }

    use super::super::WindowObservation;

    fn known_similarity() -> Similarity {
        Similarity {
            scale: 0.4,
            rotation: rotation::exp(&Vector3::new(0.2, 1.0, -0.4)),
            translation: Vector3::new(3.0, -1.0, 2.0),
        }
    }

    #[test]
    fn regauged_window_merges_exactly() {
        let (poses, points, intr) = arc_scene(7, 12, 60);
        let full = estimate(&poses, &points, &intr, 0.0, 0);
        let a = split(&full, 0..6, 0);
        let mut b = split(&full, 6..12, 1);
        let s = known_similarity();
        regauge(&mut b, &s);
        let mut map = GlobalMap::new(1f64.to_radians());
        assert_eq!(merge_window(&mut map, &a), MergeOutcome::First);
        let MergeOutcome::Anchored { similarity, .. } = merge_window(&mut map, &b) else { panic!("not anchored") };
        let expected = s.inverse();
        assert!((similarity.scale - expected.scale).abs() < 1e-9);
        assert!(rotation::angular_distance(&similarity.rotation, &expected.rotation) < 1e-9);
        for (kf, gt) in map.keyframes.iter().zip(&poses) {
            assert!((kf.pose.center - gt.center).norm() < 1e-9);
            assert!(rotation::angular_distance(&kf.pose.rotation, &gt.rotation) < 1e-9);
        }
        assert!(map.breaks.is_empty());
        for t in map.points.keys() {
            assert!(map.point_rmse(*t).unwrap() < 1e-6);
            assert!(map.segment_views(*t, 0).len() >= 2);
        }
    }

    #[test]
    fn merge_order_does_not_matter() {
        let (poses, points, intr) = arc_scene(8, 9, 40);
        let full = estimate(&poses, &points, &intr, 0.0, 0);
        let s = known_similarity();
        let windows: Vec<WindowEstimate> = (0..3)
            .map(|k| {
                let mut w = split(&full, 3 * k..3 * k + 3, k);
                if k == 1 {
                    regauge(&mut w, &s);
                }
                w
            })
            .collect();
        let mut m1 = GlobalMap::new(0.0);
        for w in &windows {
            merge_window(&mut m1, w);
        }
        // Merge 2 and 3 first, then bring in window 1.
        let mut m23 = GlobalMap::new(0.0);
        merge_window(&mut m23, &windows[1]);
        merge_window(&mut m23, &windows[2]);
        merge_window(&mut m23, &windows[0]);
        let mut a: Vec<_> = m1.keyframes.iter().map(|k| (k.info.frame_index, Point3::from(k.pose.center))).collect();
        let mut b: Vec<_> = m23.keyframes.iter().map(|k| (k.info.frame_index, Point3::from(k.pose.center))).collect();
        a.sort_by_key(|x| x.0);
        b.sort_by_key(|x| x.0);
        let pa: Vec<_> = a.iter().map(|x| x.1).collect();
        let pb: Vec<_> = b.iter().map(|x| x.1).collect();
        let sim = umeyama_similarity(&pb, &pa).unwrap();
        let rmse = (pa.iter().zip(&pb).map(|(x, y)| (sim.apply(y) - x).norm_squared()).sum::<f64>() / pa.len() as f64).sqrt();
        assert!(rmse < 1e-6, "{rmse}");
    }

    #[test]
    fn disjoint_window_starts_a_segment() {
        let (poses, points, intr) = arc_scene(9, 8, 30);
        let full = estimate(&poses, &points, &intr, 0.0, 0);
        let a = split(&full, 0..4, 0);
        let mut b = split(&full, 4..8, 1);
        b.point_ids = b.point_ids.iter().map(|t| t + 1000).collect();
        let mut map = GlobalMap::new(0.0);
        merge_window(&mut map, &a);
        assert_eq!(merge_window(&mut map, &b), MergeOutcome::NewSegment(BreakReason::NoAnchors));
        assert_eq!(map.breaks.len(), 1);
        assert_eq!(map.breaks[0].frame_index, 4);
        assert_eq!(map.segment_count(), 2);
    }

    #[test]
    fn deferred_track_is_added_back() {
        let (poses, points, intr) = arc_scene(10, 10, 30);
        let full = estimate(&poses, &points, &intr, 0.0, 0);
        let mut a = split(&full, 0..5, 0);
        let mut b = split(&full, 5..10, 1);
        let target = Point3::new(0.5, -0.3, 0.2);
        let track = 999;
        a.deferred.push(DeferredTrack {
            track,
            views: (3..5).map(|c| (c, project(&intr, &poses[c], &target).unwrap())).collect(),
        });
        b.deferred.push(DeferredTrack {
            track,
            views: (0..3).map(|c| (c, project(&intr, &poses[c + 5], &target).unwrap())).collect(),
        });
        let mut map = GlobalMap::new(1f64.to_radians());
        merge_window(&mut map, &a);
        // Two nearly coincident views are not enough on their own.
        map.parallax_min = 20f64.to_radians();
        map.deferred.insert(track);
        map.points.remove(&track);
        merge_window(&mut map, &b);
        map.parallax_min = 1f64.to_radians();
        let x = map.triangulate_track(track, 0).unwrap();
        assert_eq!(map.segment_views(track, 0).len(), 5);
        assert!((x - target).norm() < 1e-6);
    }

    #[test]
    fn refine_recovers_injected_scale() {
        let (poses, points, intr) = arc_scene(11, 12, 150);
        let full = estimate(&poses, &points, &intr, 0.0, 0);
        let mut map = GlobalMap::new(1f64.to_radians());
        merge_window(&mut map, &split(&full, 0..6, 0));
        assert_eq!(global_refine(&mut map, 2.0, &BaConfig::default()).unwrap(), None);
        merge_window(&mut map, &split(&full, 6..12, 1));
        assert_eq!(global_refine(&mut map, 2.0, &BaConfig::default()).unwrap(), None);

        let cams: Vec<usize> = (0..map.keyframes.len()).filter(|&k| map.keyframes[k].window == 1).collect();
        // A 3% error in the merge scale moves the window's cameras away from the map origin.
        for &k in &cams {
            map.keyframes[k].pose.center *= 1.03;
        }
        let report = global_refine(&mut map, 2.0, &BaConfig::default()).unwrap().expect("trigger fires");
        assert!(report.rmse_before > 2.0);
        assert!(report.rmse_after < 0.5, "{}", report.rmse_after);
        assert!(report.summary.is_monotone());
        let (_, s) = report.scale_corrections[0];
        assert!((s * 1.03 - 1.0).abs() < 0.005, "{s}");
    }
}
