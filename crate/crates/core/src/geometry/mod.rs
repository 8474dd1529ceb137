//! The 2.5D object parameterization and the projection of 3D motion back
//! into condition channels.
//!
//! Pixel `(x, y)` has its center at continuous coordinates `(x, y)`; `y`
//! grows downward. "Counterclockwise" means counterclockwise as displayed.

mod camera;
mod condition;
mod contour;
mod raster;

pub use camera::{lift, project, CameraSpec, Projected};
pub use condition::{
    build_condition, read_channels, write_channels, ConditionChannels, ConditionMode, ConditionPayload,
    ConfidenceTriple, TargetPart,
};
pub use contour::{
    extract_contour, largest_component, object25d_from_mask, simplify_contour, BBox, BinaryMask, DepthMap,
    Object25D,
};
pub use raster::{convex_hull, polygon_target_mask, render_part_masks, render_zbuffer, ZBuffer, ZEntry};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("mask has no set pixels")]
    EmptyMask,
    #[error("bounding box {0:?} lies outside the {1}x{2} image")]
    BoxOutOfBounds(BBox, usize, usize),
    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("part {0} is degenerate (fewer than 3 non-collinear points)")]
    DegeneratePart(u8),
    #[error("condition payload does not match mode {0:?}")]
    PayloadMismatch(ConditionMode),
    #[error("invalid confidence triple: {0}")]
    InvalidTriple(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
}
