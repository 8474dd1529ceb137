use serde::{Deserialize, Serialize};

use super::GeometryError;
use crate::motion::LabeledPoint;

/// Pinhole camera with square pixels and no skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub focal: f64,
    pub principal: [f64; 2],
    pub width: usize,
    pub height: usize,
}

impl CameraSpec {
    /// A camera centered on a `width x height` image.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self { focal, principal: [width as f64 / 2.0, height as f64 / 2.0], width, height }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(GeometryError::InvalidCamera(format!("focal {} must be positive", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera("image size must be positive".into()));
        }
        let [cx, cy] = self.principal;
        if !(0.0..=self.width as f64).contains(&cx) || !(0.0..=self.height as f64).contains(&cy) {
            return Err(GeometryError::InvalidCamera(format!("principal point {:?} outside image", self.principal)));
        }
        Ok(())
    }

    /// The same camera on an image resized by `factor` per axis.
    pub fn scaled(&self, factor: f64) -> Self {
        let width = ((self.width as f64 * factor).round() as usize).max(1);
        let height = ((self.height as f64 * factor).round() as usize).max(1);
        Self {
            focal: self.focal * factor,
            principal: [self.principal[0] * factor, self.principal[1] * factor],
            width,
            height,
        }
    }

    /// Pixel coordinates and depth of one camera-space point.
    pub fn project_point(&self, p: [f64; 3]) -> Result<[f64; 3], GeometryError> {
        let z = p[2];
        if !(z > 0.0) {
            return Err(GeometryError::NonPositiveDepth(z));
        }
        Ok([self.focal * p[0] / z + self.principal[0], self.focal * p[1] / z + self.principal[1], z])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub u: f64,
    pub v: f64,
    pub z: f64,
    pub label: u8,
}

/// Pinhole projection `u = f x / z + cx`, `v = f y / z + cy`, keeping `z`.
pub fn project(points: &[LabeledPoint], camera: &CameraSpec) -> Result<Vec<Projected>, GeometryError> {
    points
        .iter()
        .map(|p| {
            let [u, v, z] = camera.project_point(p.position)?;
            Ok(Projected { u, v, z, label: p.label })
        })
        .collect()
}

/// Inverse of [`project`] for a pixel and its depth.
pub fn lift(u: f64, v: f64, z: f64, camera: &CameraSpec) -> [f64; 3] {
    [(u - camera.principal[0]) * z / camera.focal, (v - camera.principal[1]) * z / camera.focal, z]
}
