//! Binary silhouette rasterization.
//!
//! Each triangle is scanned over its pixel bounding box; a pixel is covered
//! iff its center `(x + 0.5, y + 0.5)` lies inside the projected triangle.
//! Samples exactly on an edge belong to the triangle only when the edge is
//! a top or left edge, so shared edges are never double-counted or dropped.
//! Winding is normalized per triangle, so back faces render like front
//! faces; the result is the union of coverage.

use nalgebra::{Vector2, Vector3};

use super::camera::{CameraIntrinsics, MIN_DEPTH};
use super::mask::SilhouetteMask;
use super::GeometryError;

/// Renders the silhouette of `vertices` (camera frame) on a raster
/// `downscale` times coarser than `k`. Triangles with any vertex at or
/// behind the camera plane are skipped.
pub fn rasterize_silhouette(
    vertices: &[Vector3<f64>],
    faces: &[[u32; 3]],
    k: &CameraIntrinsics,
    downscale: u32,
) -> Result<SilhouetteMask, GeometryError> {
    let k = k.downscaled(downscale)?;
    let mut mask = SilhouetteMask::empty(k.width, k.height);
    let projected: Vec<Option<Vector2<f64>>> =
        vertices.iter().map(|p| (p.z > MIN_DEPTH).then(|| k.project(p))).collect();

    for f in faces {
        let (Some(a), Some(b), Some(c)) = (
            projected.get(f[0] as usize).copied().flatten(),
            projected.get(f[1] as usize).copied().flatten(),
            projected.get(f[2] as usize).copied().flatten(),
        ) else {
            continue;
        };
        fill_triangle(&mut mask, a, b, c);
    }
    Ok(mask)
}

#[derive(Clone, Copy)]
struct Edge {
    a: f64,
    b: f64,
    c: f64,
    top_left: bool,
}

impl Edge {
    // E(p) = (q - p0) × (p - p0); positive on the interior for our winding.
    fn new(p0: Vector2<f64>, p1: Vector2<f64>) -> Self {
        let dx = p1.x - p0.x;
        let dy = p1.y - p0.y;
        Self {
            a: -dy,
            b: dx,
            c: dy * p0.x - dx * p0.y,
            top_left: dy < 0.0 || (dy == 0.0 && dx > 0.0),
        }
    }

    #[inline]
    fn inside(&self, x: f64, y: f64) -> bool {
        let e = self.a * x + self.b * y + self.c;
        e > 0.0 || (e == 0.0 && self.top_left)
    }
}

fn fill_triangle(mask: &mut SilhouetteMask, a: Vector2<f64>, b: Vector2<f64>, c: Vector2<f64>) {
    let area = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    if !area.is_finite() || area == 0.0 {
        return;
    }
    let (b, c) = if area > 0.0 { (b, c) } else { (c, b) };

    let w = mask.width() as i64;
    let h = mask.height() as i64;
    let min_x = a.x.min(b.x).min(c.x);
    let max_x = a.x.max(b.x).max(c.x);
    let min_y = a.y.min(b.y).min(c.y);
    let max_y = a.y.max(b.y).max(c.y);
    // pixel i has its center at i + 0.5
    let x0 = ceil_clamped(min_x - 0.5, 0, w);
    let x1 = floor_clamped(max_x - 0.5, -1, w - 1);
    let y0 = ceil_clamped(min_y - 0.5, 0, h);
    let y1 = floor_clamped(max_y - 0.5, -1, h - 1);
    if x0 > x1 || y0 > y1 {
        return;
    }

    let edges = [Edge::new(a, b), Edge::new(b, c), Edge::new(c, a)];
    let inside = |x: i64, py: f64| edges.iter().all(|e| e.inside(x as f64 + 0.5, py));
    for y in y0..=y1 {
        let py = y as f64 + 0.5;
        // Analytic bounds from each edge, widened by a pixel and then
        // tightened with the exact test so tie-breaking stays exact.
        let (mut lo, mut hi) = (x0, x1);
        for e in &edges {
            // nearly horizontal edges give ill-conditioned bounds
            if e.a.abs() <= 1e-9 * e.b.abs() {
                continue;
            }
            let bound = -(e.b * py + e.c) / e.a - 0.5;
            if e.a > 0.0 {
                lo = lo.max(floor_clamped(bound, x0, x1 + 1) - 1);
            } else {
                hi = hi.min(ceil_clamped(bound, x0 - 1, x1) + 1);
            }
        }
        lo = lo.max(x0);
        hi = hi.min(x1);
        while lo <= hi && !inside(lo, py) {
            lo += 1;
        }
        while hi >= lo && !inside(hi, py) {
            hi -= 1;
        }
        if lo <= hi {
            mask.fill_span(y as u32, lo as u32, hi as u32 + 1);
        }
    }
}

/// `floor(v)` clamped to `[min, max]`; NaN maps to `min`.
fn floor_clamped(v: f64, min: i64, max: i64) -> i64 {
    if !(v >= min as f64) {
        return min;
    }
    if v >= max as f64 {
        return max;
    }
    let t = v as i64;
    t - i64::from((t as f64) > v)
}

/// `ceil(v)` clamped to `[min, max]`; NaN maps to `max`.
fn ceil_clamped(v: f64, min: i64, max: i64) -> i64 {
    if !(v <= max as f64) {
        return max;
    }
    if v <= min as f64 {
        return min;
    }
    let t = v as i64;
    t + i64::from((t as f64) < v)
}
