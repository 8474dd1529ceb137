use serde::{Deserialize, Serialize};

use super::camera::{lift, CameraSpec};
use super::GeometryError;
use crate::grid::Grid;
use crate::motion::{CONTOUR_POINTS, OBJECT_POINTS};

pub type BinaryMask = Grid<bool>;

/// Per-pixel depth in scene units. `scale` is the units-per-step used when
/// the map is stored as a 16-bit image.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub grid: Grid<f64>,
    pub scale: f64,
}

impl DepthMap {
    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self { grid: Grid::filled(width, height, depth), scale: 1e-3 }
    }
}

/// Inclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn of_mask(mask: &BinaryMask) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..mask.height {
            for x in 0..mask.width {
                if *mask.get(x, y) {
                    b = Some(match b {
                        None => BBox { x0: x, y0: y, x1: x, y1: y },
                        Some(b) => BBox { x0: b.x0.min(x), y0: b.y0.min(y), x1: b.x1.max(x), y1: b.y1.max(y) },
                    });
                }
            }
        }
        b
    }

    /// Corners TL, TR, BR, BL.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (x0, y0, x1, y1) = (self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64);
        [[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0]
    }
}

/// 8-connected neighbors, clockwise as displayed starting from west.
const RING: [(i64, i64); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

fn ring_index(dx: i64, dy: i64) -> usize {
    RING.iter().position(|&d| d == (dx, dy)).expect("offset is an 8-neighbor")
}

/// The largest 8-connected component of `mask`; ties go to the component
/// found first in row-major order.
pub fn largest_component(mask: &BinaryMask) -> Option<BinaryMask> {
    let mut label = Grid::filled(mask.width, mask.height, 0usize);
    let mut best: Option<(usize, usize)> = None;
    let mut next = 0;
    let mut stack = Vec::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !*mask.get(x, y) || *label.get(x, y) != 0 {
                continue;
            }
            next += 1;
            let mut size = 0;
            label.set(x, y, next);
            stack.push((x as i64, y as i64));
            while let Some((cx, cy)) = stack.pop() {
                size += 1;
                for (dx, dy) in RING {
                    let (nx, ny) = (cx + dx, cy + dy);
                    if mask.at(nx, ny) == Some(&true) && label.at(nx, ny) == Some(&0) {
                        label.set(nx as usize, ny as usize, next);
                        stack.push((nx, ny));
                    }
                }
            }
            if best.is_none_or(|(_, s)| size > s) {
                best = Some((next, size));
            }
        }
    }
    let (id, _) = best?;
    Some(label.map(|&l| l == id))
}

/// Moore-neighbor boundary of the largest 8-connected component,
/// counterclockwise, starting at its topmost-leftmost pixel. Tracing stops
/// when the first move (start to second pixel) is about to repeat, so
/// pixels on one-pixel-wide parts may appear twice but the boundary is
/// walked once.
pub fn extract_contour(mask: &BinaryMask) -> Result<Vec<(usize, usize)>, GeometryError> {
    let comp = largest_component(mask).ok_or(GeometryError::EmptyMask)?;
    let start = comp.data.iter().position(|&b| b).expect("component is non-empty");
    let start = ((start % comp.width) as i64, (start / comp.width) as i64);
    let set = |p: (i64, i64)| comp.at(p.0, p.1) == Some(&true);

    // The west neighbor of the first pixel in row-major order is background.
    let mut back = 0usize;
    let mut p = start;
    let mut second = None;
    let mut clockwise = vec![start];
    let limit = 4 * comp.data.len() + 8;
    loop {
        let mut found = None;
        for i in 1..=8 {
            let d = (back + i) % 8;
            let c = (p.0 + RING[d].0, p.1 + RING[d].1);
            if set(c) {
                found = Some((c, (back + i - 1) % 8));
                break;
            }
        }
        let Some((c, prev)) = found else { break };
        match second {
            None => second = Some(c),
            Some(s) if p == start && c == s => break,
            Some(_) => {}
        }
        let b = (p.0 + RING[prev].0, p.1 + RING[prev].1);
        back = ring_index(b.0 - c.0, b.1 - c.1);
        p = c;
        if clockwise.len() > limit {
            break;
        }
        clockwise.push(p);
    }
    if clockwise.len() > 1 && clockwise.last() == Some(&start) {
        clockwise.pop();
    }
    // Reverse everything after the start to turn clockwise into
    // counterclockwise while keeping the start first.
    clockwise[1..].reverse();
    Ok(clockwise.into_iter().map(|(x, y)| (x as usize, y as usize)).collect())
}

/// Resamples a closed contour to `n` vertices equally spaced in arc length,
/// starting at the first point. Contours with at most `n` points are
/// repeated cyclically instead.
pub fn simplify_contour(contour: &[(usize, usize)], n: usize) -> Vec<[f64; 2]> {
    let pts: Vec<[f64; 2]> = contour.iter().map(|&(x, y)| [x as f64, y as f64]).collect();
    if pts.is_empty() || n == 0 {
        return Vec::new();
    }
    if pts.len() <= n {
        return (0..n).map(|k| pts[k % pts.len()]).collect();
    }
    let m = pts.len();
    let seg = |i: usize| {
        let (a, b) = (pts[i], pts[(i + 1) % m]);
        ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
    };
    let lengths: Vec<f64> = (0..m).map(seg).collect();
    let total: f64 = lengths.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    let mut walked = 0.0;
    for k in 0..n {
        let target = total * k as f64 / n as f64;
        while i + 1 < m && walked + lengths[i] < target {
            walked += lengths[i];
            i += 1;
        }
        let t = if lengths[i] > 0.0 { ((target - walked) / lengths[i]).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (pts[i], pts[(i + 1) % m]);
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    out
}

/// The 21-point 2.5D representation: 16 contour vertices, box corners TL,
/// TR, BR, BL, and the box center, in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object25D {
    pub points: Vec<[f64; 3]>,
}

impl Object25D {
    /// Flattened 63-value pose.
    pub fn to_pose(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Contour vertices and box corners sit on pixel centers, half a pixel
/// inside the silhouette; they are pushed out by this much.
pub const OUTLINE_OFFSET: f64 = 0.5;

/// Moves each vertex of a closed polygon along its outward normal (the
/// perpendicular of the chord between its neighbours). Degenerate polygons
/// are returned unchanged.
fn offset_outward(poly: &[[f64; 2]], dist: f64) -> Vec<[f64; 2]> {
    let n = poly.len();
    let area2: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    if n < 3 || area2 == 0.0 {
        return poly.to_vec();
    }
    let sign = area2.signum();
    (0..n)
        .map(|i| {
            let (prev, next) = (poly[(i + n - 1) % n], poly[(i + 1) % n]);
            let d = [next[0] - prev[0], next[1] - prev[1]];
            let len = d[0].hypot(d[1]);
            if len == 0.0 {
                return poly[i];
            }
            [poly[i][0] + sign * dist * d[1] / len, poly[i][1] - sign * dist * d[0] / len]
        })
        .collect()
}

/// Builds and lifts the 21 points of a masked object.
///
/// The 16 contour vertices and the box corners are moved half a pixel
/// outward so they trace the silhouette rather than its boundary pixels.
/// Contour vertices take the depth of the pixel nearest their unshifted
/// position; box corners, and vertices whose nearest pixel is off the mask,
/// take the median depth over the mask.
pub fn object25d_from_mask(
    mask: &BinaryMask,
    bbox: BBox,
    depth: &DepthMap,
    camera: &CameraSpec,
) -> Result<Object25D, GeometryError> {
    if bbox.x1 >= mask.width || bbox.y1 >= mask.height || bbox.x0 > bbox.x1 || bbox.y0 > bbox.y1 {
        return Err(GeometryError::BoxOutOfBounds(bbox, mask.width, mask.height));
    }
    if !depth.grid.same_size(mask) {
        return Err(GeometryError::DimensionMismatch(format!(
            "depth {}x{} vs mask {}x{}",
            depth.grid.width, depth.grid.height, mask.width, mask.height
        )));
    }
    let contour = extract_contour(mask)?;
    let on_mask: Vec<f64> =
        mask.data.iter().zip(&depth.grid.data).filter(|(&m, _)| m).map(|(_, &d)| d).collect();
    let med = median(on_mask);
    let depth_at = |u: f64, v: f64| {
        let (x, y) = (u.round() as i64, v.round() as i64);
        match (mask.at(x, y), depth.grid.at(x, y)) {
            (Some(true), Some(&d)) if d > 0.0 => d,
            _ => med,
        }
    };
    let mut points = Vec::with_capacity(OBJECT_POINTS);
    let vertices = simplify_contour(&contour, CONTOUR_POINTS);
    for (&[u0, v0], [u, v]) in vertices.iter().zip(offset_outward(&vertices, OUTLINE_OFFSET)) {
        points.push(lift(u, v, depth_at(u0, v0), camera));
    }
    const CORNER_SIGNS: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];
    for ([u, v], [su, sv]) in bbox.corners().into_iter().zip(CORNER_SIGNS) {
        points.push(lift(u + OUTLINE_OFFSET * su, v + OUTLINE_OFFSET * sv, med, camera));
    }
    let [cu, cv] = bbox.center();
    points.push(lift(cu, cv, depth_at(cu, cv), camera));
    if med <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(med));
    }
    Ok(Object25D { points })
}
