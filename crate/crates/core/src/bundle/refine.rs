use nalgebra::{DVector, Matrix2x3, Point3, Vector2, Vector3};

use super::lm::{levenberg_marquardt, BlockJacobian, Linearization, LmSummary, SchurProblem};
use super::map::GlobalMap;
use super::reprojection::reprojection_residual;
use super::{BaConfig, BundleError};
use crate::geometry::{rotation, CameraIntrinsics, Pose, Similarity};
use crate::tracking::TrackId;

/// Per-coordinate RMSE of observations made by cameras outside the window
/// that placed the point, over one segment. Zero when there are none.
pub fn cross_window_rmse(map: &GlobalMap, segment: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (track, p) in &map.points {
        if p.segment != segment {
            continue;
        }
        for (k, px) in map.segment_views(*track, segment) {
            let kf = &map.keyframes[k];
            if kf.window == p.owner_window {
                continue;
            }
            let r = reprojection_residual(&kf.intrinsics, &kf.pose, &p.position, &px).map_or(1e6, |r| r.norm());
            sum += r * r;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / (2 * n) as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub segment: usize,
    pub rmse_before: f64,
    pub rmse_after: f64,
    /// Scale applied to each refined window, by map window index.
    pub scale_corrections: Vec<(usize, f64)>,
    pub summary: LmSummary,
}

/// Per-window similarity blocks `[w, tau, sigma]` acting about the window's
/// camera centroid; the segment's first window is held fixed.
#[derive(Clone)]
struct SegmentProblem<'a> {
    poses: Vec<Pose>,
    intr: &'a [CameraIntrinsics],
    /// Block of each camera, `None` for the frozen window.
    cam_block: &'a [Option<usize>],
    block_cams: &'a [Vec<usize>],
    centroids: Vec<Vector3<f64>>,
    log_scales: Vec<f64>,
    points: Vec<Point3<f64>>,
    obs: &'a [(usize, usize, Vector2<f64>)],
    by_point: &'a [Vec<usize>],
}

impl SegmentProblem<'_> {
    fn update_centroids(&mut self) {
        for (b, cams) in self.block_cams.iter().enumerate() {
            self.centroids[b] = cams.iter().map(|&c| self.poses[c].center).sum::<Vector3<f64>>() / cams.len() as f64;
        }
    }
}

impl SchurProblem for SegmentProblem<'_> {
    fn block_sizes(&self) -> Vec<usize> {
        vec![7; self.block_cams.len()]
    }

    fn num_points(&self) -> usize {
        self.points.len()
    }

    fn point_observations(&self) -> &[Vec<usize>] {
        self.by_point
    }

    fn num_observations(&self) -> usize {
        self.obs.len()
    }

    fn residual(&self, k: usize) -> Option<Vector2<f64>> {
        let (p, c, px) = &self.obs[k];
        reprojection_residual(&self.intr[*c], &self.poses[*c], &self.points[*p], px)
    }

    fn linearize(&self, k: usize) -> Option<Linearization> {
        let (p, c, px) = self.obs[k];
        let pose = &self.poses[c];
        let residual = reprojection_residual(&self.intr[c], pose, &self.points[p], &px)?;
        let xc = pose.to_camera(&self.points[p]);
        let iz = 1.0 / xc.z;
        let f = self.intr[c].focal;
        let du = Matrix2x3::new(iz, 0.0, -xc.x * iz * iz, 0.0, iz, -xc.y * iz * iz) * -f;
        let r = *pose.rotation.matrix();
        let mut blocks = Vec::with_capacity(1);
        if let Some(b) = self.cam_block[c] {
            let cbar = self.centroids[b];
            let mut m = BlockJacobian::zeros(7);
            m.fixed_columns_mut::<3>(0).copy_from(&(du * r * rotation::skew(&(self.points[p].coords - cbar))));
            m.fixed_columns_mut::<3>(3).copy_from(&(du * -r));
            m.set_column(6, &(du * (-r * (pose.center - cbar))));
            blocks.push((b, m));
        }
        Some(Linearization { residual, d_point: du * r, blocks })
    }

    fn apply(&mut self, blocks: &[DVector<f64>], points: &[Vector3<f64>]) {
        for (b, cams) in self.block_cams.iter().enumerate() {
            let d = &blocks[b];
            let w = Vector3::new(d[0], d[1], d[2]);
            let tau = Vector3::new(d[3], d[4], d[5]);
            let s = d[6].exp();
            let q = rotation::exp(&w);
            let cbar = self.centroids[b];
            for &c in cams {
                let pose = &mut self.poses[c];
                pose.center = cbar + q * (pose.center - cbar) * s + tau;
                pose.rotation *= q.inverse();
            }
            self.log_scales[b] += d[6];
        }
        for (p, dp) in self.points.iter_mut().zip(points) {
            *p += dp;
        }
        self.update_centroids();
    }
}

/// Cross-window refinement of the most recent segment, run when its
/// cross-window RMSE exceeds `trigger_px`. `Ok(None)` when not needed.
pub fn global_refine(map: &mut GlobalMap, trigger_px: f64, cfg: &BaConfig) -> Result<Option<RefineReport>, BundleError> {
    let Some(segment) = map.keyframes.last().map(|k| k.segment) else { return Ok(None) };
    let windows: Vec<usize> = (0..map.windows.len()).filter(|&w| map.windows[w].segment == segment).collect();
    if windows.len() < 2 {
        return Ok(None);
    }
    let rmse_before = cross_window_rmse(map, segment);
    if !(rmse_before > trigger_px) {
        return Ok(None);
    }

    let cams: Vec<usize> = (0..map.keyframes.len()).filter(|&k| map.keyframes[k].segment == segment).collect();
    let mut local = vec![usize::MAX; map.keyframes.len()];
    for (i, &k) in cams.iter().enumerate() {
        local[k] = i;
    }
    let mut block_of_window = vec![None; map.windows.len()];
    for (b, &w) in windows.iter().skip(1).enumerate() {
        block_of_window[w] = Some(b);
    }
    let cam_block: Vec<Option<usize>> = cams.iter().map(|&k| block_of_window[map.keyframes[k].window]).collect();
    let mut block_cams = vec![Vec::new(); windows.len() - 1];
    for (i, b) in cam_block.iter().enumerate() {
        if let Some(b) = b {
            block_cams[*b].push(i);
        }
    }
    let intr: Vec<CameraIntrinsics> = cams.iter().map(|&k| map.keyframes[k].intrinsics).collect();

    let mut tracks: Vec<TrackId> = Vec::new();
    let mut points = Vec::new();
    let mut obs = Vec::new();
    let mut by_point = Vec::new();
    for (track, p) in &map.points {
        if p.segment != segment {
            continue;
        }
        let views = map.segment_views(*track, segment);
        let idx = points.len();
        let mut list = Vec::with_capacity(views.len());
        for (k, px) in views {
            list.push(obs.len());
            obs.push((idx, local[k], px));
        }
        tracks.push(*track);
        points.push(p.position);
        by_point.push(list);
    }

    let mut problem = SegmentProblem {
        poses: cams.iter().map(|&k| map.keyframes[k].pose).collect(),
        intr: &intr,
        cam_block: &cam_block,
        block_cams: &block_cams,
        centroids: vec![Vector3::zeros(); block_cams.len()],
        log_scales: vec![0.0; block_cams.len()],
        points,
        obs: &obs,
        by_point: &by_point,
    };
    problem.update_centroids();
    let summary = levenberg_marquardt(&mut problem, cfg)?;

    for (i, &k) in cams.iter().enumerate() {
        map.keyframes[k].pose = problem.poses[i];
    }
    for (track, x) in tracks.iter().zip(&problem.points) {
        if let Some(p) = map.points.get_mut(track) {
            p.position = *x;
        }
    }
    let mut scale_corrections = Vec::new();
    for (b, &w) in windows.iter().skip(1).enumerate() {
        let s = problem.log_scales[b].exp();
        let rec = &mut map.windows[w];
        rec.similarity = Similarity { scale: rec.similarity.scale * s, ..rec.similarity };
        scale_corrections.push((w, s));
    }
    let rmse_after = cross_window_rmse(map, segment);
    Ok(Some(RefineReport { segment, rmse_before, rmse_after, scale_corrections, summary }))
}
