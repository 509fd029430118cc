//! Shi-Tomasi ("good features to track") corner detection.

use nalgebra::Vector2;

use super::image::GrayImage;
use super::TrackingError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerConfig {
    pub max_corners: usize,
    pub quality: f64,
    pub min_distance: f64,
}

impl Default for CornerConfig {
    fn default() -> Self {
        Self { max_corners: 800, quality: 0.01, min_distance: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub position: Vector2<f64>,
    pub response: f64,
}

/// Minimum eigenvalue of the 3x3-summed structure tensor at each pixel.
pub fn min_eigen_response(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let px = |x: usize, y: usize| img.get(x, y) as f64 / 255.0;
    let mut gxx = vec![0.0; w * h];
    let mut gxy = vec![0.0; w * h];
    let mut gyy = vec![0.0; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let gx = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
            let gy = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
            let i = y * w + x;
            gxx[i] = gx * gx;
            gxy[i] = gx * gy;
            gyy[i] = gy * gy;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 2..h.saturating_sub(2) {
        for x in 2..w.saturating_sub(2) {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for dy in 0..3 {
                for dx in 0..3 {
                    let i = (y + dy - 1) * w + (x + dx - 1);
                    a += gxx[i];
                    b += gxy[i];
                    c += gyy[i];
                }
            }
            let half = 0.5 * (a + c);
            let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            out[y * w + x] = (half - disc).max(0.0);
        }
    }
    out
}

/// Corners sorted strongest first, at least `min_distance` apart from each
/// other and from every point in `existing`.
pub fn detect_corners_excluding(
    img: &GrayImage,
    cfg: &CornerConfig,
    existing: &[Vector2<f64>],
) -> Result<Vec<Corner>, TrackingError> {
    if img.is_empty() {
        return Err(TrackingError::EmptyImage);
    }
    if !(cfg.quality > 0.0 && cfg.quality <= 1.0) {
        return Err(TrackingError::InvalidConfig(format!("quality {} not in (0, 1]", cfg.quality)));
    }
    if cfg.max_corners == 0 {
        return Ok(Vec::new());
    }
    let (w, h) = (img.width, img.height);
    let response = min_eigen_response(img);
    let max = response.iter().copied().fold(0.0f64, f64::max);
    if max <= 1e-12 {
        return Ok(Vec::new());
    }
    let threshold = cfg.quality * max;
    let mut candidates = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let v = response[y * w + x];
            if v < threshold {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in 0..3 {
                for dx in 0..3 {
                    let (nx, ny) = (x + dx - 1, y + dy - 1);
                    if (nx, ny) != (x, y) && response[ny * w + nx] > v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                candidates.push((v, x, y));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));

    // Spatial grid with cell size = min_distance.
    let cell = cfg.min_distance.max(1.0);
    let gw = (w as f64 / cell).ceil() as usize + 1;
    let gh = (h as f64 / cell).ceil() as usize + 1;
    let mut grid: Vec<Vec<Vector2<f64>>> = vec![Vec::new(); gw * gh];
    let cell_of = |p: &Vector2<f64>| {
        let cx = (p.x.max(0.0) / cell) as usize;
        let cy = (p.y.max(0.0) / cell) as usize;
        (cx.min(gw - 1), cy.min(gh - 1))
    };
    let min_sq = cfg.min_distance * cfg.min_distance;
    let far_enough = |grid: &Vec<Vec<Vector2<f64>>>, p: &Vector2<f64>| {
        let (cx, cy) = cell_of(p);
        for gy in cy.saturating_sub(1)..=(cy + 1).min(gh - 1) {
            for gx in cx.saturating_sub(1)..=(cx + 1).min(gw - 1) {
                if grid[gy * gw + gx].iter().any(|q| (q - p).norm_squared() < min_sq) {
                    return false;
                }
            }
        }
        true
    };
    for p in existing {
        let (cx, cy) = cell_of(p);
        grid[cy * gw + cx].push(*p);
    }
    let mut out = Vec::new();
    for (v, x, y) in candidates {
        let p = Vector2::new(x as f64, y as f64);
        if min_sq > 0.0 && !far_enough(&grid, &p) {
            continue;
        }
        let (cx, cy) = cell_of(&p);
        grid[cy * gw + cx].push(p);
        out.push(Corner { position: p, response: v });
        if out.len() >= cfg.max_corners {
            break;
        }
    }
    Ok(out)
}

pub fn detect_corners(img: &GrayImage, cfg: &CornerConfig) -> Result<Vec<Corner>, TrackingError> {
    detect_corners_excluding(img, cfg, &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_corners() {
        let img = GrayImage::from_fn(64, 48, |_, _| 128);
        assert!(detect_corners(&img, &CornerConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn empty_image_errors() {
        let img = GrayImage::new(0, 0);
        assert!(matches!(detect_corners(&img, &CornerConfig::default()), Err(TrackingError::EmptyImage)));
    }

    #[test]
    fn squares_give_corners_at_square_corners() {
        let squares = [(20usize, 20usize), (80, 20), (20, 70), (80, 70)];
        let size = 16;
        let img = GrayImage::from_fn(128, 112, |x, y| {
            let inside = squares.iter().any(|&(sx, sy)| x >= sx && x < sx + size && y >= sy && y < sy + size);
            if inside { 255 } else { 0 }
        });
        let cfg = CornerConfig { max_corners: 100, quality: 0.1, min_distance: 5.0 };
        let corners = detect_corners(&img, &cfg).unwrap();
        let mut truth = Vec::new();
        for &(sx, sy) in &squares {
            for (dx, dy) in [(0.0, 0.0), (size as f64, 0.0), (0.0, size as f64), (size as f64, size as f64)] {
                truth.push(Vector2::new(sx as f64 - 0.5 + dx, sy as f64 - 0.5 + dy));
            }
        }
        let near: usize = truth
            .iter()
            .filter(|t| corners.iter().any(|c| (c.position - *t).norm() <= 2.0))
            .count();
        assert_eq!(near, 16, "corners: {:?}", corners.iter().map(|c| c.position).collect::<Vec<_>>());
        for (sx, sy) in squares {
            let per_square = corners
                .iter()
                .filter(|c| {
                    c.position.x > sx as f64 - 4.0
                        && c.position.x < (sx + size) as f64 + 4.0
                        && c.position.y > sy as f64 - 4.0
                        && c.position.y < (sy + size) as f64 + 4.0
                })
                .count();
            assert_eq!(per_square, 4);
        }
    }

    #[test]
    fn count_cap_and_ordering() {
        let img = GrayImage::from_fn(160, 160, |x, y| if ((x / 16) + (y / 16)) % 2 == 0 { 230 } else { 20 });
        let cfg = CornerConfig { max_corners: 10, quality: 0.01, min_distance: 5.0 };
        let corners = detect_corners(&img, &cfg).unwrap();
        assert_eq!(corners.len(), 10);
        assert!(corners.windows(2).all(|w| w[0].response >= w[1].response));
    }

    #[test]
    fn respects_existing_points() {
        let img = GrayImage::from_fn(160, 160, |x, y| if ((x / 16) + (y / 16)) % 2 == 0 { 230 } else { 20 });
        let cfg = CornerConfig { max_corners: 1000, quality: 0.01, min_distance: 10.0 };
        let existing = vec![Vector2::new(48.0, 48.0)];
        let corners = detect_corners_excluding(&img, &cfg, &existing).unwrap();
        assert!(corners.iter().all(|c| (c.position - existing[0]).norm() >= 10.0));
        for (i, a) in corners.iter().enumerate() {
            for b in &corners[i + 1..] {
                assert!((a.position - b.position).norm() >= 10.0);
            }
        }
    }
}
