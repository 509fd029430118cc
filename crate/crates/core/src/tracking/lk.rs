//! Pyramidal iterative Lucas-Kanade with a forward-backward check.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use super::image::GrayImage;
use super::TrackingError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LkConfig {
    pub levels: usize,
    /// Odd window side length.
    pub window: usize,
    pub max_iterations: usize,
    pub epsilon: f64,
    /// Forward-backward rejection threshold (px).
    pub fb_max: f64,
    /// Minimum eigenvalue of the normalized gradient matrix.
    pub min_eigen: f64,
}

impl Default for LkConfig {
    fn default() -> Self {
        Self { levels: 3, window: 21, max_iterations: 30, epsilon: 0.01, fb_max: 1.0, min_eigen: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Tracked,
    /// Forward-backward error above `fb_max`.
    Inconsistent,
    /// Gradient matrix too weak to solve (textureless window).
    Textureless,
    OutOfBounds,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackResult {
    pub point: Vector2<f64>,
    pub fb_error: f64,
    pub status: TrackStatus,
}

/// Float raster with bilinear sampling, intensities in `[0, 1]`.
#[derive(Debug, Clone)]
struct Plane {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Plane {
    fn from_image(img: &GrayImage) -> Self {
        Self { width: img.width, height: img.height, data: img.data.iter().map(|&v| v as f32 / 255.0).collect() }
    }

    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample with clamped borders.
    fn sample(&self, x: f64, y: f64) -> f64 {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let top = self.at(x0, y0) as f64 * (1.0 - fx) + self.at(x1, y0) as f64 * fx;
        let bottom = self.at(x0, y1) as f64 * (1.0 - fx) + self.at(x1, y1) as f64 * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// 5-tap binomial blur then 2x decimation.
    fn downsample(&self) -> Self {
        let (w, h) = (self.width, self.height);
        let k = [1.0f32, 4.0, 6.0, 4.0, 1.0];
        let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut tmp = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    acc += kv * self.at(clampi(x as isize + i as isize - 2, w), y);
                }
                tmp[y * w + x] = acc / 16.0;
            }
        }
        let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
        let mut data = vec![0.0f32; nw * nh];
        for y in 0..nh {
            for x in 0..nw {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    acc += kv * tmp[clampi(2 * y as isize + i as isize - 2, h) * w + 2 * x];
                }
                data[y * nw + x] = acc / 16.0;
            }
        }
        Self { width: nw, height: nh, data }
    }
}

/// Image pyramid, finest level first.
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<Plane>,
}

impl Pyramid {
    pub fn new(img: &GrayImage, levels: usize) -> Self {
        let mut out = vec![Plane::from_image(img)];
        while out.len() < levels.max(1) {
            let last = out.last().expect("non-empty");
            if last.width < 8 || last.height < 8 {
                break;
            }
            let next = last.downsample();
            out.push(next);
        }
        Self { levels: out }
    }

    pub fn width(&self) -> usize {
        self.levels[0].width
    }

    pub fn height(&self) -> usize {
        self.levels[0].height
    }
}

fn in_bounds(p: &Vector2<f64>, w: usize, h: usize) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (h - 1) as f64
}

/// Tracks one point from `prev` to `next`; `None` status on failure.
fn track_point(prev: &Pyramid, next: &Pyramid, p: &Vector2<f64>, cfg: &LkConfig) -> Result<Vector2<f64>, TrackStatus> {
    let half = (cfg.window / 2) as isize;
    let n_px = (cfg.window * cfg.window) as f64;
    let top = prev.levels.len().min(next.levels.len()) - 1;
    let mut guess = Vector2::zeros();
    for level in (0..=top).rev() {
        let scale = (1u64 << level) as f64;
        let a = &prev.levels[level];
        let b = &next.levels[level];
        let pl = p / scale;
        // Template and gradients at the previous-frame location.
        let mut tmpl = Vec::with_capacity(cfg.window * cfg.window);
        let mut g = Matrix2::zeros();
        for dy in -half..=half {
            for dx in -half..=half {
                let (x, y) = (pl.x + dx as f64, pl.y + dy as f64);
                let ix = 0.5 * (a.sample(x + 1.0, y) - a.sample(x - 1.0, y));
                let iy = 0.5 * (a.sample(x, y + 1.0) - a.sample(x, y - 1.0));
                g += Matrix2::new(ix * ix, ix * iy, ix * iy, iy * iy);
                tmpl.push((a.sample(x, y), ix, iy));
            }
        }
        let gn = g / n_px;
        let tr = gn.trace();
        let det = gn.determinant();
        let min_eig = 0.5 * tr - (0.25 * tr * tr - det).max(0.0).sqrt();
        if min_eig < cfg.min_eigen {
            return Err(TrackStatus::Textureless);
        }
        let g_inv = match g.try_inverse() {
            Some(m) => m,
            None => return Err(TrackStatus::Textureless),
        };
        let mut d = Vector2::zeros();
        for _ in 0..cfg.max_iterations {
            let mut mismatch = Vector2::zeros();
            let mut k = 0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let (i0, ix, iy) = tmpl[k];
                    k += 1;
                    let x = pl.x + dx as f64 + guess.x + d.x;
                    let y = pl.y + dy as f64 + guess.y + d.y;
                    let diff = i0 - b.sample(x, y);
                    mismatch += Vector2::new(diff * ix, diff * iy);
                }
            }
            let step = g_inv * mismatch;
            d += step;
            if !d.iter().all(|v| v.is_finite()) {
                return Err(TrackStatus::OutOfBounds);
            }
            if step.norm() < cfg.epsilon {
                break;
            }
        }
        guess = if level > 0 { (guess + d) * 2.0 } else { guess + d };
    }
    let out = p + guess;
    if !in_bounds(&out, next.width(), next.height()) {
        return Err(TrackStatus::OutOfBounds);
    }
    Ok(out)
}

/// Forward then backward tracking of every point; results keep input order.
pub fn track_bidirectional_pyr(prev: &Pyramid, next: &Pyramid, points: &[Vector2<f64>], cfg: &LkConfig) -> Vec<TrackResult> {
    points
        .par_iter()
        .map(|p| {
            if !in_bounds(p, prev.width(), prev.height()) {
                return TrackResult { point: *p, fb_error: f64::INFINITY, status: TrackStatus::OutOfBounds };
            }
            let fwd = match track_point(prev, next, p, cfg) {
                Ok(q) => q,
                Err(status) => return TrackResult { point: *p, fb_error: f64::INFINITY, status },
            };
            let back = match track_point(next, prev, &fwd, cfg) {
                Ok(q) => q,
                Err(status) => return TrackResult { point: fwd, fb_error: f64::INFINITY, status },
            };
            let fb_error = (back - p).norm();
            let status = if fb_error > cfg.fb_max { TrackStatus::Inconsistent } else { TrackStatus::Tracked };
            TrackResult { point: fwd, fb_error, status }
        })
        .collect()
}

pub fn track_bidirectional(
    prev: &GrayImage,
    next: &GrayImage,
    points: &[Vector2<f64>],
    cfg: &LkConfig,
) -> Result<Vec<TrackResult>, TrackingError> {
    if prev.width != next.width || prev.height != next.height {
        return Err(TrackingError::DimensionMismatch {
            prev: (prev.width, prev.height),
            next: (next.width, next.height),
        });
    }
    if prev.is_empty() {
        return Err(TrackingError::EmptyImage);
    }
    let a = Pyramid::new(prev, cfg.levels);
    let b = Pyramid::new(next, cfg.levels);
    Ok(track_bidirectional_pyr(&a, &b, points, cfg))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Smooth texture from a sum of incommensurate sinusoids.
    pub(crate) fn texture(x: f64, y: f64) -> u8 {
        let v = 0.5
            + 0.18 * (0.21 * x + 0.05 * y).sin()
            + 0.14 * (0.07 * x - 0.23 * y + 1.0).sin()
            + 0.1 * (0.13 * x * 0.7 + 0.17 * y + 2.0).cos() * (0.09 * y).sin()
            + 0.08 * (0.31 * x + 0.29 * y).sin();
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    fn textured(w: usize, h: usize, shift: (f64, f64)) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| texture(x as f64 - shift.0, y as f64 - shift.1))
    }

    #[test]
    fn recovers_translation() {
        let prev = textured(160, 120, (0.0, 0.0));
        let next = textured(160, 120, (3.0, 0.0));
        let pts: Vec<_> = [(40.0, 40.0), (80.0, 60.0), (120.0, 80.0), (60.0, 90.0)]
            .iter()
            .map(|&(x, y)| Vector2::new(x, y))
            .collect();
        let res = track_bidirectional(&prev, &next, &pts, &LkConfig::default()).unwrap();
        for (r, p) in res.iter().zip(&pts) {
            assert_eq!(r.status, TrackStatus::Tracked);
            assert!((r.point - p - Vector2::new(3.0, 0.0)).norm() < 0.1, "{:?}", r.point - p);
            assert!(r.fb_error < 0.05, "fb {}", r.fb_error);
        }
    }

    #[test]
    fn identity_frame() {
        let img = textured(100, 80, (0.0, 0.0));
        let pts = vec![Vector2::new(50.0, 40.0), Vector2::new(30.5, 20.25)];
        let res = track_bidirectional(&img, &img, &pts, &LkConfig::default()).unwrap();
        for (r, p) in res.iter().zip(&pts) {
            assert_eq!(r.status, TrackStatus::Tracked);
            assert!((r.point - p).norm() < 1e-6);
            assert!(r.fb_error < 1e-6);
        }
    }

    #[test]
    fn textureless_rejected() {
        let img = GrayImage::from_fn(100, 80, |x, _| if x < 10 { texture(x as f64, 0.0) } else { 90 });
        let res = track_bidirectional(&img, &img, &[Vector2::new(60.0, 40.0)], &LkConfig::default()).unwrap();
        assert_eq!(res[0].status, TrackStatus::Textureless);
    }

    #[test]
    fn dimension_mismatch() {
        let a = GrayImage::new(10, 10);
        let b = GrayImage::new(12, 10);
        assert!(matches!(
            track_bidirectional(&a, &b, &[], &LkConfig::default()),
            Err(TrackingError::DimensionMismatch { .. })
        ));
    }
}
