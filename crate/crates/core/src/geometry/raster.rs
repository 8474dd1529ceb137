use super::camera::{project, CameraSpec};
use super::GeometryError;
use crate::grid::Grid;
use crate::motion::LabeledPoint;

/// Winning splat at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZEntry {
    pub z: f64,
    pub object: usize,
    pub point: usize,
    pub label: u8,
}

impl ZEntry {
    /// Smaller depth wins, then lower object id, then lower point index.
    fn beats(&self, other: &ZEntry) -> bool {
        (self.z, self.object, self.point) < (other.z, other.object, other.point)
    }
}

pub type ZBuffer = Grid<Option<ZEntry>>;

fn covers(px: usize, py: usize, u: f64, v: f64, r2: f64) -> bool {
    let (dx, dy) = (px as f64 - u, py as f64 - v);
    dx * dx + dy * dy <= r2
}

/// Splats every point of every object as a disc of `splat_radius` pixels
/// and keeps, per pixel, the nearest splat.
pub fn render_zbuffer(
    objects: &[Vec<LabeledPoint>],
    camera: &CameraSpec,
    splat_radius: f64,
) -> Result<ZBuffer, GeometryError> {
    let mut buf: ZBuffer = Grid::filled(camera.width, camera.height, None);
    let r2 = splat_radius * splat_radius;
    for (object, points) in objects.iter().enumerate() {
        for (point, p) in project(points, camera)?.into_iter().enumerate() {
            let entry = ZEntry { z: p.z, object, point, label: p.label };
            let x_lo = (p.u - splat_radius).floor().max(0.0);
            let y_lo = (p.v - splat_radius).floor().max(0.0);
            let x_hi = (p.u + splat_radius).ceil().min(camera.width as f64 - 1.0);
            let y_hi = (p.v + splat_radius).ceil().min(camera.height as f64 - 1.0);
            if x_hi < x_lo || y_hi < y_lo {
                continue;
            }
            for y in y_lo as usize..=y_hi as usize {
                for x in x_lo as usize..=x_hi as usize {
                    if !covers(x, y, p.u, p.v, r2) {
                        continue;
                    }
                    let slot = &mut buf.data[y * camera.width + x];
                    if slot.is_none_or(|cur| entry.beats(&cur)) {
                        *slot = Some(entry);
                    }
                }
            }
        }
    }
    Ok(buf)
}

/// Part-label grid (0 = background) of a z-buffered splat rendering.
pub fn render_part_masks(
    objects: &[Vec<LabeledPoint>],
    camera: &CameraSpec,
    splat_radius: f64,
) -> Result<Grid<u8>, GeometryError> {
    Ok(render_zbuffer(objects, camera, splat_radius)?.map(|e| e.map_or(0, |e| e.label)))
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain; collinear points are dropped.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_hull(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= -1e-9)
}

/// Rasterizes the convex hull of each part's 2D points into a label grid.
/// A pixel is inside when its center passes every edge's half-plane test.
/// Later parts overwrite earlier ones.
pub fn polygon_target_mask(
    parts: &[(u8, Vec<[f64; 2]>)],
    width: usize,
    height: usize,
) -> Result<Grid<u8>, GeometryError> {
    let mut grid = Grid::filled(width, height, 0u8);
    for (label, points) in parts {
        let hull = convex_hull(points);
        if hull.len() < 3 {
            return Err(GeometryError::DegeneratePart(*label));
        }
        let (mut x_lo, mut y_lo, mut x_hi, mut y_hi) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in &hull {
            x_lo = x_lo.min(p[0]);
            y_lo = y_lo.min(p[1]);
            x_hi = x_hi.max(p[0]);
            y_hi = y_hi.max(p[1]);
        }
        let x_lo = x_lo.floor().max(0.0) as usize;
        let y_lo = y_lo.floor().max(0.0) as usize;
        let x_hi = x_hi.ceil().min(width as f64 - 1.0);
        let y_hi = y_hi.ceil().min(height as f64 - 1.0);
        if x_hi < 0.0 || y_hi < 0.0 {
            continue;
        }
        for y in y_lo..=y_hi as usize {
            for x in x_lo..=x_hi as usize {
                if inside_hull(&hull, [x as f64, y as f64]) {
                    grid.set(x, y, *label);
                }
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn cam() -> CameraSpec {
        CameraSpec::centered(60.0, 48, 32)
    }

    fn brute_force(objects: &[Vec<LabeledPoint>], camera: &CameraSpec, radius: f64) -> Grid<u8> {
        let mut out = Grid::filled(camera.width, camera.height, 0u8);
        for y in 0..camera.height {
            for x in 0..camera.width {
                let mut best: Option<(f64, usize, usize, u8)> = None;
                for (o, pts) in objects.iter().enumerate() {
                    for (k, p) in pts.iter().enumerate() {
                        let [u, v, z] = camera.project_point(p.position).unwrap();
                        let (dx, dy) = (x as f64 - u, y as f64 - v);
                        if dx * dx + dy * dy <= radius * radius
                            && best.is_none_or(|b| (z, o, k) < (b.0, b.1, b.2))
                        {
                            best = Some((z, o, k, p.label));
                        }
                    }
                }
                out.set(x, y, best.map_or(0, |b| b.3));
            }
        }
        out
    }

    fn random_scene(seed: u64) -> Vec<Vec<LabeledPoint>> {
        let mut r = rng::seeded(seed);
        (0..3)
            .map(|_| {
                let c = [r.random_range(-0.5..0.5), r.random_range(-0.3..0.3), r.random_range(1.5..4.0)];
                (0..r.random_range(5..30))
                    .map(|_| LabeledPoint {
                        position: [
                            c[0] + r.random_range(-0.3..0.3),
                            c[1] + r.random_range(-0.3..0.3),
                            c[2] + r.random_range(-0.4..0.4),
                        ],
                        label: r.random_range(1..=12),
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn occlusion_matches_brute_force_on_random_scenes() {
        for seed in 0..100 {
            let scene = random_scene(seed);
            assert_eq!(render_part_masks(&scene, &cam(), 3.0).unwrap(), brute_force(&scene, &cam(), 3.0), "seed {seed}");
        }
    }

    #[test]
    fn nearer_disc_wins_overlap() {
        let a = vec![LabeledPoint { position: [0.0, 0.0, 1.0], label: 1 }];
        let b = vec![LabeledPoint { position: [0.0, 0.0, 2.0], label: 2 }];
        let g = render_part_masks(&[b.clone(), a.clone()], &cam(), 3.0).unwrap();
        assert_eq!(*g.get(24, 16), 1);
        // Equal depths: the lower object id wins.
        let c = vec![LabeledPoint { position: [0.0, 0.0, 1.0], label: 7 }];
        let g = render_part_masks(&[c, a], &cam(), 3.0).unwrap();
        assert_eq!(*g.get(24, 16), 7);
    }

    #[test]
    fn labels_come_from_the_object() {
        let scene = random_scene(5);
        let labels: std::collections::HashSet<u8> = scene[0].iter().map(|p| p.label).collect();
        let g = render_part_masks(&scene[..1], &cam(), 2.0).unwrap();
        assert!(g.data.iter().all(|l| *l == 0 || labels.contains(l)));
        let bad = vec![vec![LabeledPoint { position: [0.0, 0.0, -1.0], label: 1 }]];
        assert!(matches!(render_part_masks(&bad, &cam(), 2.0), Err(GeometryError::NonPositiveDepth(_))));
    }

    #[test]
    fn triangle_fills_centroid() {
        let tri = vec![[2.0, 2.0], [20.0, 4.0], [8.0, 18.0]];
        let g = polygon_target_mask(&[(5, tri)], 32, 24).unwrap();
        assert_eq!(*g.get(10, 8), 5);
        assert_eq!(*g.get(30, 20), 0);
        let line = vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        assert!(matches!(polygon_target_mask(&[(1, line)], 8, 8), Err(GeometryError::DegeneratePart(1))));
    }

    #[test]
    fn later_parts_overwrite() {
        let a = vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]];
        let b = vec![[5.0, 5.0], [15.0, 5.0], [15.0, 15.0]];
        let g = polygon_target_mask(&[(1, a), (2, b)], 20, 20).unwrap();
        assert_eq!(*g.get(9, 6), 2);
        assert_eq!(*g.get(2, 2), 1);
    }

    fn area(poly: &[[f64; 2]]) -> f64 {
        (0..poly.len()).map(|i| cross([0.0, 0.0], poly[i], poly[(i + 1) % poly.len()])).sum::<f64>().abs() / 2.0
    }

    proptest! {
        #[test]
        fn hull_contains_every_triangle(pts in prop::collection::vec((0.0..30.0f64, 0.0..30.0f64), 3..20)) {
            let pts: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
            let hull = convex_hull(&pts);
            let a = if hull.len() >= 3 { area(&hull) } else { 0.0 };
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    for k in j + 1..pts.len() {
                        prop_assert!(area(&[pts[i], pts[j], pts[k]]) <= a + 1e-9);
                    }
                }
            }
        }

        #[test]
        fn rasterized_hull_matches_point_in_polygon(pts in prop::collection::vec((0.0..30.0f64, 0.0..20.0f64), 3..12)) {
            let pts: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
            let hull = convex_hull(&pts);
            prop_assume!(hull.len() >= 3);
            let g = polygon_target_mask(&[(3, pts)], 32, 24).unwrap();
            // Oracle: even-odd ray crossing on the hull polygon, away from edges.
            for y in 0..24 {
                for x in 0..32 {
                    let p = [x as f64, y as f64];
                    let near_edge = (0..hull.len()).any(|i| {
                        let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
                        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                        (cross(a, b, p) / len).abs() < 1e-6
                    });
                    if near_edge { continue; }
                    let mut inside = false;
                    for i in 0..hull.len() {
                        let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
                        if (a[1] > p[1]) != (b[1] > p[1]) {
                            let xi = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                            if p[0] < xi { inside = !inside; }
                        }
                    }
                    prop_assert_eq!(*g.get(x, y) == 3, inside, "pixel ({}, {})", x, y);
                }
            }
        }
    }
}
