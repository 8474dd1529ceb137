//! Parametric motion sequences and the articulated stand-in body model.
//!
//! A [`MotionSequence`] is an `F x pose_dim` matrix of per-frame parameters
//! for one tracked object. Articulated categories (human, animal) store one
//! XYZ Euler triple per joint of a small skeleton; generic objects store the
//! 21-point 2.5D representation (16 contour points, 4 box corners, center),
//! flattened row-major.

use std::sync::{Arc, OnceLock};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of points in the 2.5D object representation.
pub const OBJECT_POINTS: usize = 21;
/// Contour vertices kept per object.
pub const CONTOUR_POINTS: usize = 16;
/// Samples placed along each bone when densifying a skeleton.
pub const BONE_SAMPLES: usize = 8;
/// Number of trailing transitions averaged by [`extrapolate`].
pub const EXTRAPOLATION_WINDOW: usize = 4;
/// Per-frame velocity decay used by [`extrapolate`].
pub const EXTRAPOLATION_DECAY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Human,
    Animal,
    GenericObject,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Human, Category::Animal, Category::GenericObject];

    pub fn index(self) -> usize {
        match self {
            Category::Human => 0,
            Category::Animal => 1,
            Category::GenericObject => 2,
        }
    }

    pub fn is_articulated(self) -> bool {
        !matches!(self, Category::GenericObject)
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Human => "human",
            Category::Animal => "animal",
            Category::GenericObject => "generic_object",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub id: usize,
    pub parent: Option<usize>,
    pub rest_offset: [f64; 3],
    pub part_label: u8,
    #[serde(default)]
    pub name: String,
}

/// Dimensions and skeleton of a parametric body model.
///
/// `reference_pose_dim` records the dimensionality of the full parametric
/// model the stand-in replaces (165 for the human model, 105 for the animal
/// model); it is metadata only. `pose_dim` is what sequences actually carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricModelSpec {
    pub category: Category,
    pub pose_dim: usize,
    pub reference_pose_dim: usize,
    pub shape_dim: usize,
    pub expression_dim: usize,
    pub part_count: u8,
    pub skeleton: Vec<Joint>,
}

#[derive(Deserialize)]
struct PresetFile {
    category: Category,
    reference_pose_dim: usize,
    shape_dim: usize,
    expression_dim: usize,
    part_count: u8,
    skeleton: Vec<Joint>,
}

fn parse_preset(text: &str) -> ParametricModelSpec {
    let file: PresetFile = serde_json::from_str(text).expect("bundled preset is valid JSON");
    let pose_dim = if file.category.is_articulated() {
        3 * file.skeleton.len()
    } else {
        3 * OBJECT_POINTS
    };
    let spec = ParametricModelSpec {
        category: file.category,
        pose_dim,
        reference_pose_dim: file.reference_pose_dim,
        shape_dim: file.shape_dim,
        expression_dim: file.expression_dim,
        part_count: file.part_count,
        skeleton: file.skeleton,
    };
    spec.validate().expect("bundled preset is consistent");
    spec
}

impl ParametricModelSpec {
    /// Shared preset for a category. Presets are parsed once.
    pub fn preset(category: Category) -> Arc<ParametricModelSpec> {
        static PRESETS: OnceLock<[Arc<ParametricModelSpec>; 3]> = OnceLock::new();
        let presets = PRESETS.get_or_init(|| {
            [
                Arc::new(parse_preset(include_str!("../presets/human.json"))),
                Arc::new(parse_preset(include_str!("../presets/animal.json"))),
                Arc::new(parse_preset(include_str!("../presets/generic_object.json"))),
            ]
        });
        presets[category.index()].clone()
    }

    pub fn joint_count(&self) -> usize {
        self.skeleton.len()
    }

    pub fn is_articulated(&self) -> bool {
        self.category.is_articulated()
    }

    /// Checks the structural invariants: pose_dim matches the skeleton, part
    /// labels are in range, and the skeleton is a tree listed parents-first.
    pub fn validate(&self) -> Result<(), MotionError> {
        let bad = |msg: String| Err(MotionError::InvalidSpec(msg));
        if self.pose_dim == 0 || self.part_count == 0 {
            return bad("pose_dim and part_count must be positive".into());
        }
        if !self.is_articulated() {
            if self.pose_dim != 3 * OBJECT_POINTS {
                return bad(format!("generic object pose_dim must be {}", 3 * OBJECT_POINTS));
            }
            return Ok(());
        }
        if self.pose_dim != 3 * self.skeleton.len() {
            return bad(format!(
                "pose_dim {} != 3 x {} joints",
                self.pose_dim,
                self.skeleton.len()
            ));
        }
        let mut roots = 0;
        for (i, joint) in self.skeleton.iter().enumerate() {
            if joint.id != i {
                return bad(format!("joint at index {i} has id {}", joint.id));
            }
            if joint.part_label == 0 || joint.part_label > self.part_count {
                return bad(format!("joint {i} part label {} out of range", joint.part_label));
            }
            match joint.parent {
                None => roots += 1,
                // Parents listed first rules out cycles.
                Some(p) if p >= i => return bad(format!("joint {i} parent {p} is not earlier")),
                Some(_) => {}
            }
            if !joint.rest_offset.iter().all(|v| v.is_finite()) {
                return bad(format!("joint {i} rest offset not finite"));
            }
        }
        if roots != 1 {
            return bad(format!("skeleton has {roots} roots"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MotionError {
    #[error("sequence too short: {frames} frame(s), need at least {needed}")]
    SequenceTooShort { frames: usize, needed: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("model is not articulated")]
    NotArticulated,
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid motion sequence: {0:?}")]
    Invalid(Vec<Violation>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One violated [`MotionSequence`] invariant, as reported by
/// [`MotionSequence::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    NoFrames,
    NonPositiveFps,
    DimensionMismatch { frame: usize, expected: usize, found: usize },
    NonFiniteEntry { frame: usize, channel: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub model: Arc<ParametricModelSpec>,
    pub fps: f64,
    pub frames: Vec<Vec<f64>>,
}

impl MotionSequence {
    pub fn new(model: Arc<ParametricModelSpec>, fps: f64, frames: Vec<Vec<f64>>) -> Self {
        Self { model, fps, frames }
    }

    /// Builds a sequence and rejects it if any invariant is violated.
    pub fn try_new(
        model: Arc<ParametricModelSpec>,
        fps: f64,
        frames: Vec<Vec<f64>>,
    ) -> Result<Self, MotionError> {
        let seq = Self::new(model, fps, frames);
        seq.ensure_valid()?;
        Ok(seq)
    }

    /// A sequence holding `len` copies of `frame`.
    pub fn constant(model: Arc<ParametricModelSpec>, fps: f64, frame: &[f64], len: usize) -> Self {
        Self::new(model, fps, vec![frame.to_vec(); len])
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn pose_dim(&self) -> usize {
        self.model.pose_dim
    }

    pub fn category(&self) -> Category {
        self.model.category
    }

    /// Same model and fps, new frames.
    pub fn with_frames(&self, frames: Vec<Vec<f64>>) -> Self {
        Self::new(self.model.clone(), self.fps, frames)
    }

    /// Returns one entry per violated invariant; empty means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.frames.is_empty() {
            out.push(Violation::NoFrames);
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            out.push(Violation::NonPositiveFps);
        }
        let expected = self.pose_dim();
        if let Some((frame, row)) = self
            .frames
            .iter()
            .enumerate()
            .find(|(_, row)| row.len() != expected)
        {
            out.push(Violation::DimensionMismatch { frame, expected, found: row.len() });
        }
        'scan: for (frame, row) in self.frames.iter().enumerate() {
            for (channel, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    out.push(Violation::NonFiniteEntry { frame, channel });
                    break 'scan;
                }
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<(), MotionError> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(MotionError::Invalid(violations))
        }
    }

    fn ensure_at_least(&self, needed: usize) -> Result<(), MotionError> {
        self.ensure_valid()?;
        if self.len() < needed {
            return Err(MotionError::SequenceTooShort { frames: self.len(), needed });
        }
        Ok(())
    }

    /// Mean squared difference to `other` over all frames and channels.
    pub fn mse(&self, other: &MotionSequence) -> Result<f64, MotionError> {
        if self.len() != other.len() {
            return Err(MotionError::DimensionMismatch { expected: self.len(), found: other.len() });
        }
        let (sum, count) = sq_error_sum(&self.frames, &other.frames)?;
        Ok(if count == 0 { 0.0 } else { sum / count as f64 })
    }
}

/// Sum of squared differences and the number of compared entries.
pub fn sq_error_sum(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(f64, usize), MotionError> {
    let mut sum = 0.0;
    let mut count = 0;
    for (ra, rb) in a.iter().zip(b) {
        if ra.len() != rb.len() {
            return Err(MotionError::DimensionMismatch { expected: ra.len(), found: rb.len() });
        }
        for (x, y) in ra.iter().zip(rb) {
            sum += (x - y) * (x - y);
        }
        count += ra.len();
    }
    Ok((sum, count))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionStrength {
    pub per_transition: Vec<f64>,
    pub mean: f64,
}

/// Dimension-normalized speed: `|f[i+1] - f[i]| / sqrt(pose_dim)` per
/// transition, plus the mean.
pub fn motion_strength(seq: &MotionSequence) -> Result<MotionStrength, MotionError> {
    seq.ensure_at_least(2)?;
    let norm = (seq.pose_dim() as f64).sqrt();
    let per_transition: Vec<f64> = seq
        .frames
        .windows(2)
        .map(|w| {
            let sq: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| (b - a) * (b - a)).sum();
            sq.sqrt() / norm
        })
        .collect();
    let mean = per_transition.iter().sum::<f64>() / per_transition.len() as f64;
    Ok(MotionStrength { per_transition, mean })
}

/// Linear per-channel resampling onto a uniform grid of `new_len` frames.
///
/// Endpoints are preserved exactly and `new_len == len` reproduces the input
/// bit for bit.
pub fn resample(seq: &MotionSequence, new_len: usize) -> Result<MotionSequence, MotionError> {
    seq.ensure_at_least(2)?;
    if new_len == 0 {
        return Err(MotionError::InvalidArgument("new_len must be positive".into()));
    }
    let last = seq.len() - 1;
    if new_len == 1 {
        return Ok(seq.with_frames(vec![seq.frames[0].clone()]));
    }
    let frames = (0..new_len)
        .map(|i| {
            // Integer numerator keeps shared grid points exact.
            let pos = (i * last) as f64 / (new_len - 1) as f64;
            let lo = (pos.floor() as usize).min(last);
            let frac = pos - lo as f64;
            if frac == 0.0 || lo == last {
                return seq.frames[lo].clone();
            }
            let (a, b) = (&seq.frames[lo], &seq.frames[lo + 1]);
            a.iter().zip(b).map(|(x, y)| x + (y - x) * frac).collect()
        })
        .collect();
    Ok(seq.with_frames(frames))
}

/// Appends `extra` frames continuing the mean velocity of the last
/// [`EXTRAPOLATION_WINDOW`] transitions, decayed by [`EXTRAPOLATION_DECAY`]
/// per appended frame.
pub fn extrapolate(seq: &MotionSequence, extra: usize) -> Result<MotionSequence, MotionError> {
    seq.ensure_at_least(2)?;
    let dim = seq.pose_dim();
    let window = EXTRAPOLATION_WINDOW.min(seq.len() - 1);
    let tail = &seq.frames[seq.len() - 1 - window..];
    let mut velocity = vec![0.0; dim];
    for w in tail.windows(2) {
        for c in 0..dim {
            velocity[c] += (w[1][c] - w[0][c]) / window as f64;
        }
    }
    let mut frames = seq.frames.clone();
    let mut factor = 1.0;
    for _ in 0..extra {
        factor *= EXTRAPOLATION_DECAY;
        let prev = frames.last().expect("non-empty");
        let next: Vec<f64> = prev.iter().zip(&velocity).map(|(p, v)| p + factor * v).collect();
        frames.push(next);
    }
    Ok(seq.with_frames(frames))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub position: [f64; 3],
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosedSkeleton {
    /// World-space joint positions, in skeleton order.
    pub joints: Vec<[f64; 3]>,
    /// One point per joint followed by [`BONE_SAMPLES`] points per bone.
    pub points: Vec<LabeledPoint>,
}

/// Intrinsic XYZ Euler rotation `Rx(a) * Ry(b) * Rz(c)`.
pub fn euler_xyz(angles: &[f64]) -> Matrix3<f64> {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    rx * ry * rz
}

/// Poses the stand-in skeleton.
///
/// Each joint sits at its parent's position plus the parent's accumulated
/// rotation applied to the scaled rest offset; joint rotations compose
/// down the chain. Points are in model space (root at the origin).
pub fn forward_kinematics(
    spec: &ParametricModelSpec,
    pose: &[f64],
    shape_scale: f64,
) -> Result<PosedSkeleton, MotionError> {
    if !spec.is_articulated() {
        return Err(MotionError::NotArticulated);
    }
    if pose.len() != spec.pose_dim {
        return Err(MotionError::DimensionMismatch { expected: spec.pose_dim, found: pose.len() });
    }
    if !pose.iter().all(|v| v.is_finite()) {
        return Err(MotionError::InvalidArgument("pose contains non-finite angles".into()));
    }
    let n = spec.joint_count();
    let mut rotations: Vec<Matrix3<f64>> = Vec::with_capacity(n);
    let mut positions: Vec<Vector3<f64>> = Vec::with_capacity(n);
    for (j, joint) in spec.skeleton.iter().enumerate() {
        let local = euler_xyz(&pose[3 * j..3 * j + 3]);
        let offset = Vector3::from(joint.rest_offset) * shape_scale;
        match joint.parent {
            None => {
                rotations.push(local);
                positions.push(offset);
            }
            Some(p) => {
                positions.push(positions[p] + rotations[p] * offset);
                rotations.push(rotations[p] * local);
            }
        }
    }
    let joints: Vec<[f64; 3]> = positions.iter().map(|p| [p.x, p.y, p.z]).collect();
    let mut points: Vec<LabeledPoint> = spec
        .skeleton
        .iter()
        .zip(&joints)
        .map(|(joint, &position)| LabeledPoint { position, label: joint.part_label })
        .collect();
    for joint in &spec.skeleton {
        let Some(p) = joint.parent else { continue };
        let (a, b) = (positions[p], positions[joint.id]);
        for k in 1..=BONE_SAMPLES {
            let t = k as f64 / (BONE_SAMPLES + 1) as f64;
            let q = a + (b - a) * t;
            points.push(LabeledPoint { position: [q.x, q.y, q.z], label: joint.part_label });
        }
    }
    Ok(PosedSkeleton { joints, points })
}

/// The 21-point representation of a camera-facing disc of `radius` centered
/// at `center`: 16 contour points counterclockwise on screen starting at the
/// top, box corners TL, TR, BR, BL, then the center. Flattened to 63 values.
pub fn disc_object_pose(center: [f64; 3], radius: f64) -> Vec<f64> {
    let mut pts: Vec<[f64; 3]> = Vec::with_capacity(OBJECT_POINTS);
    for k in 0..CONTOUR_POINTS {
        let phi = k as f64 * std::f64::consts::TAU / CONTOUR_POINTS as f64;
        // y grows downward on screen, so heading left from the top is
        // counterclockwise as displayed.
        pts.push([center[0] - radius * phi.sin(), center[1] - radius * phi.cos(), center[2]]);
    }
    for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
        pts.push([center[0] + sx * radius, center[1] + sy * radius, center[2]]);
    }
    pts.push(center);
    pts.into_iter().flatten().collect()
}

/// Reads point `i` of a flattened 21-point pose.
pub fn object_point(pose: &[f64], i: usize) -> [f64; 3] {
    [pose[3 * i], pose[3 * i + 1], pose[3 * i + 2]]
}

/// Densified point set for a generic object: the contour, the center and a
/// barycentric fill of the fan from the center to each contour edge. All
/// points carry part label 1. Box corners are off-object and not emitted.
pub fn object_points(pose: &[f64], fill: usize) -> Result<Vec<LabeledPoint>, MotionError> {
    if pose.len() != 3 * OBJECT_POINTS {
        return Err(MotionError::DimensionMismatch { expected: 3 * OBJECT_POINTS, found: pose.len() });
    }
    let center = Vector3::from(object_point(pose, OBJECT_POINTS - 1));
    let contour: Vec<Vector3<f64>> =
        (0..CONTOUR_POINTS).map(|i| Vector3::from(object_point(pose, i))).collect();
    let mut points: Vec<LabeledPoint> = contour
        .iter()
        .chain(std::iter::once(&center))
        .map(|p| LabeledPoint { position: [p.x, p.y, p.z], label: 1 })
        .collect();
    let n = fill.max(1);
    for k in 0..CONTOUR_POINTS {
        let (a, b) = (contour[k] - center, contour[(k + 1) % CONTOUR_POINTS] - center);
        for i in 0..=n {
            for j in 0..=(n - i) {
                if (i == n && j == 0) || (i == 0 && j == n) || (i == 0 && j == 0) {
                    continue;
                }
                let q = center + a * (i as f64 / n as f64) + b * (j as f64 / n as f64);
                points.push(LabeledPoint { position: [q.x, q.y, q.z], label: 1 });
            }
        }
    }
    Ok(points)
}

/// World-space labeled points for one frame of any category.
///
/// Articulated poses go through [`forward_kinematics`] and are translated by
/// `placement`; generic-object poses already hold world coordinates.
pub fn posed_points(
    spec: &ParametricModelSpec,
    pose: &[f64],
    shape_scale: f64,
    placement: [f64; 3],
) -> Result<Vec<LabeledPoint>, MotionError> {
    if spec.is_articulated() {
        let posed = forward_kinematics(spec, pose, shape_scale)?;
        Ok(posed
            .points
            .into_iter()
            .map(|p| LabeledPoint {
                position: [
                    p.position[0] + placement[0],
                    p.position[1] + placement[1],
                    p.position[2] + placement[2],
                ],
                label: p.label,
            })
            .collect())
    } else {
        object_points(pose, 8)
    }
}
