//! The three-stage extract / optimize / regenerate loop and its metrics.
//!
//! Stage 1 generates a short low-resolution clip from the user's (empty or
//! target-pose) condition. Stage 2 recovers per-object motion from that
//! clip's pixels and refines it with the motion prior. Stage 3 rasterizes
//! the refined motion into full-motion condition channels and regenerates
//! at full resolution and length.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    build_condition, object25d_from_mask, render_zbuffer, write_channels, BBox, CameraSpec, ConditionChannels,
    ConditionMode, ConditionPayload, ConfidenceTriple, DepthMap, GeometryError, TargetPart,
};
use crate::grid::Grid;
use crate::io::{write_json, write_motion_set, IoError};
use crate::motion::{
    motion_strength, posed_points, resample, sq_error_sum, LabeledPoint, MotionError, MotionSequence,
    MotionStrength, ParametricModelSpec,
};
use crate::pmp::{load_checkpoint, Conditioning, CorpusItem, PmpError, PmpModel};
use crate::rng;
use crate::simgen::{
    frame_points, gt_for_config, label_from_intensity, object_center, part_intensity, render_video, GeneratorConfig, SceneObject,
    SceneSpec, SimError, SyntheticGenerator, VideoClip, VideoGenerator,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage 1 (coarse generation) failed: {0}")]
    Stage1(#[source] Box<PipelineError>),
    #[error("stage 2 (extraction and refinement) failed: {0}")]
    Stage2(#[source] Box<PipelineError>),
    #[error("stage 3 (regeneration) failed: {0}")]
    Stage3(#[source] Box<PipelineError>),
    #[error("extraction failed: object {object} has no pixels in {missing} of {frames} frames")]
    ExtractionFailed { object: usize, missing: usize, frames: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Pmp(#[from] PmpError),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl PipelineError {
    fn stage(stage: u8) -> impl FnOnce(PipelineError) -> PipelineError {
        move |e| match stage {
            1 => PipelineError::Stage1(Box::new(e)),
            2 => PipelineError::Stage2(Box::new(e)),
            _ => PipelineError::Stage3(Box::new(e)),
        }
    }
}

fn default_mix() -> [f64; 3] {
    [0.4, 0.3, 0.3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionConfig {
    pub coarse: GeneratorConfig,
    pub fine: GeneratorConfig,
    #[serde(default)]
    pub confidence_triple: ConfidenceTriple,
    /// Probabilities of full-motion, target-pose and empty conditioning when
    /// sampling training corpora.
    #[serde(default = "default_mix")]
    pub training_mix: [f64; 3],
    #[serde(default)]
    pub pmp_checkpoint: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RevisionConfig {
    fn default() -> Self {
        Self {
            coarse: GeneratorConfig::coarse(),
            fine: GeneratorConfig::fine(),
            confidence_triple: ConfidenceTriple::default(),
            training_mix: default_mix(),
            pmp_checkpoint: PathBuf::new(),
            seed: 42,
        }
    }
}

impl RevisionConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.coarse.validate()?;
        self.fine.validate()?;
        self.confidence_triple.validate().map_err(PipelineError::InvalidConfig)?;
        let sum: f64 = self.training_mix.iter().sum();
        if self.training_mix.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(PipelineError::InvalidConfig(format!(
                "training_mix {:?} must be probabilities summing to 1",
                self.training_mix
            )));
        }
        Ok(())
    }
}

/// Draws a conditioning mode from the training mix.
pub fn sample_condition_mode(mix: [f64; 3], rng: &mut rng::Rng) -> ConditionMode {
    let u: f64 = rng.random();
    if u < mix[0] {
        ConditionMode::FullMotion
    } else if u < mix[0] + mix[1] {
        ConditionMode::TargetPose
    } else {
        ConditionMode::Empty
    }
}

/// What the user supplies besides the first frame. Target-pose part points
/// are in base-resolution pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum UserCondition {
    Empty,
    TargetPose { parts: Vec<TargetPart> },
}

/// A target-pose condition from the scene's own final ground-truth frame:
/// the projected points of every part, per label.
pub fn target_pose_from_gt(scene: &SceneSpec) -> Result<UserCondition, PipelineError> {
    let gt = crate::simgen::scene_gt(scene)?;
    let last = scene.duration - 1;
    let objects = frame_points(scene, &gt, last)?;
    let mut parts = Vec::new();
    for points in &objects {
        let mut labels: Vec<u8> = points.iter().map(|p| p.label).collect();
        labels.sort_unstable();
        labels.dedup();
        for l in labels {
            let pts = points
                .iter()
                .filter(|p| p.label == l)
                .map(|p| scene.camera.project_point(p.position).map(|q| [q[0], q[1]]))
                .collect::<Result<Vec<_>, _>>()?;
            parts.push(TargetPart { label: l, points: pts });
        }
    }
    Ok(UserCondition::TargetPose { parts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub traj_mse: f64,
    pub mask_miou: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR reported for identical frames.
pub const PSNR_CAP: f64 = 99.0;
const MAX_PIXEL: f64 = 255.0;
const SSIM_WINDOW: usize = 8;
const SSIM_STRIDE: usize = 4;

fn check_clips(a: &VideoClip, b: &VideoClip) -> Result<(), PipelineError> {
    if a.len() != b.len() || a.width != b.width || a.height != b.height || a.is_empty() {
        return Err(PipelineError::ShapeMismatch(format!(
            "clips are {}x{}x{} and {}x{}x{}",
            a.len(),
            a.width,
            a.height,
            b.len(),
            b.width,
            b.height
        )));
    }
    if a.frames.iter().chain(&b.frames).any(|f| f.width != a.width || f.height != a.height) {
        return Err(PipelineError::ShapeMismatch("frame size differs from clip size".into()));
    }
    Ok(())
}

/// Per-frame PSNR averaged over frames; identical frames score [`PSNR_CAP`].
pub fn psnr(pred: &VideoClip, reference: &VideoClip) -> Result<f64, PipelineError> {
    check_clips(pred, reference)?;
    let total: f64 = pred
        .frames
        .iter()
        .zip(&reference.frames)
        .map(|(a, b)| {
            let mse = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>()
                / a.data.len() as f64;
            if mse == 0.0 {
                PSNR_CAP
            } else {
                (10.0 * (MAX_PIXEL * MAX_PIXEL / mse).log10()).min(PSNR_CAP)
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

fn window_starts(len: usize) -> Vec<usize> {
    if len <= SSIM_WINDOW {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..=len - SSIM_WINDOW).step_by(SSIM_STRIDE).collect();
    if *v.last().unwrap() != len - SSIM_WINDOW {
        v.push(len - SSIM_WINDOW);
    }
    v
}

/// Mean SSIM over 8x8 windows at stride 4 (plus a flush window at the far
/// edge) with uniform weights. Frames smaller than a window use one window
/// covering the frame.
pub fn ssim_frame(a: &Grid<u8>, b: &Grid<u8>) -> f64 {
    let c1 = (0.01 * MAX_PIXEL).powi(2);
    let c2 = (0.03 * MAX_PIXEL).powi(2);
    let (wx, wy) = (SSIM_WINDOW.min(a.width), SSIM_WINDOW.min(a.height));
    let mut sum = 0.0;
    let mut n = 0usize;
    for &y0 in &window_starts(a.height) {
        for &x0 in &window_starts(a.width) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + wy {
                for x in x0..x0 + wx {
                    let (p, q) = (*a.get(x, y) as f64, *b.get(x, y) as f64);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let k = (wx * wy) as f64;
            let (ma, mb) = (sa / k, sb / k);
            let va = saa / k - ma * ma;
            let vb = sbb / k - mb * mb;
            let cov = sab / k - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    sum / n as f64
}

pub fn ssim(pred: &VideoClip, reference: &VideoClip) -> Result<f64, PipelineError> {
    check_clips(pred, reference)?;
    let total: f64 = pred.frames.iter().zip(&reference.frames).map(|(a, b)| ssim_frame(a, b)).sum();
    Ok(total / pred.len() as f64)
}

/// Mean over frames of the intersection over union of non-background
/// pixels. A frame where both masks are empty scores 1.
pub fn mask_miou(pred: &[Grid<u8>], gt: &[Grid<u8>]) -> Result<f64, PipelineError> {
    if pred.len() != gt.len() || pred.is_empty() || pred.iter().zip(gt).any(|(a, b)| !a.same_size(b)) {
        return Err(PipelineError::ShapeMismatch("mask sequences differ in length or size".into()));
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &q) in a.data.iter().zip(&b.data) {
                inter += (p != 0 && q != 0) as usize;
                union += (p != 0 || q != 0) as usize;
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Mean squared parameter error pooled over every object, frame and channel.
pub fn traj_mse(pred: &[MotionSequence], gt: &[MotionSequence]) -> Result<f64, PipelineError> {
    if pred.len() != gt.len() {
        return Err(PipelineError::ShapeMismatch(format!("{} vs {} motions", pred.len(), gt.len())));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        let (s, c) = sq_error_sum(&p.frames, &g.frames)?;
        sum += s;
        count += c;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Non-background masks of a clip.
pub fn clip_masks(clip: &VideoClip) -> Vec<Grid<u8>> {
    clip.frames.iter().map(|f| f.map(|&v| (v != 0) as u8)).collect()
}

pub fn eval_metrics(
    pred_clip: &VideoClip,
    ref_clip: &VideoClip,
    pred_motions: &[MotionSequence],
    gt_motions: &[MotionSequence],
    pred_masks: &[Grid<u8>],
    gt_masks: &[Grid<u8>],
) -> Result<EvalReport, PipelineError> {
    Ok(EvalReport {
        traj_mse: traj_mse(pred_motions, gt_motions)?,
        mask_miou: mask_miou(pred_masks, gt_masks)?,
        psnr: psnr(pred_clip, ref_clip)?,
        ssim: ssim(pred_clip, ref_clip)?,
    })
}

/// Compares a clip and its realized motions against the scene's ground
/// truth rendered with the same generator config.
pub fn evaluate_against_gt(
    scene: &SceneSpec,
    config: &GeneratorConfig,
    clip: &VideoClip,
    realized: &[MotionSequence],
) -> Result<EvalReport, PipelineError> {
    let gt = gt_for_config(scene, config)?;
    let reference = render_video(scene, &gt, config)?;
    eval_metrics(clip, &reference, realized, &gt, &clip_masks(clip), &clip_masks(&reference))
}

/// User-condition channels at the coarse generator's frame count and
/// resolution.
pub fn user_channels(
    scene: &SceneSpec,
    user: &UserCondition,
    config: &RevisionConfig,
) -> Result<ConditionChannels, PipelineError> {
    let frames = config.coarse.frame_count(scene.duration);
    let cam = config.coarse.camera(&scene.camera);
    let (mode, payload) = match user {
        UserCondition::Empty => {
            (ConditionMode::Empty, ConditionPayload::Empty { frames, width: cam.width, height: cam.height })
        }
        UserCondition::TargetPose { parts } => {
            let k = config.coarse.resolution_scale;
            let parts = parts
                .iter()
                .map(|p| TargetPart { label: p.label, points: p.points.iter().map(|q| [q[0] * k, q[1] * k]).collect() })
                .collect();
            (ConditionMode::TargetPose, ConditionPayload::TargetPose { frames, parts, width: cam.width, height: cam.height })
        }
    };
    Ok(build_condition(mode, &payload, config.confidence_triple)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Output {
    pub channels: ConditionChannels,
    pub clip: VideoClip,
    /// The generator's realized motion, for evaluation only.
    pub realized: Vec<MotionSequence>,
}

pub fn stage1_coarse(
    generator: &dyn VideoGenerator,
    scene: &SceneSpec,
    user: &UserCondition,
    config: &RevisionConfig,
    seed: u64,
) -> Result<Stage1Output, PipelineError> {
    let channels = user_channels(scene, user, config)?;
    let (clip, realized) = generator.generate(scene, &channels, &config.coarse, seed)?;
    Ok(Stage1Output { channels, clip, realized })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Output {
    /// Motion read off the clip, at the clip's frame count.
    pub extracted: Vec<MotionSequence>,
    /// Extracted motion resampled to the fine frame count.
    pub raw: Vec<MotionSequence>,
    pub strength: Vec<MotionStrength>,
    pub refined: Vec<MotionSequence>,
}

/// Gauss-Newton iterations per frame when fitting articulated poses.
const IK_ITERATIONS: usize = 8;
/// Pull toward the previous frame's pose, in squared pixels per squared
/// radian.
const IK_DAMPING: f64 = 0.5;
/// Pixel count at which a part's centroid gets half weight (squared).
const IK_SLIVER: f64 = 8.0;
/// Largest joint-angle change per iteration, in radians.
const IK_MAX_STEP: f64 = 0.25;

/// 8-connected components of non-zero pixels, in row-major discovery order.
fn components(frame: &Grid<u8>) -> Vec<Vec<(usize, usize)>> {
    let mut seen = Grid::filled(frame.width, frame.height, false);
    let mut out = Vec::new();
    for y0 in 0..frame.height {
        for x0 in 0..frame.width {
            if *frame.get(x0, y0) == 0 || *seen.get(x0, y0) {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(x0, y0)]);
            seen.set(x0, y0, true);
            while let Some((x, y)) = queue.pop_front() {
                comp.push((x, y));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if frame.at(nx, ny).is_some_and(|&v| v != 0) && !*seen.get(nx as usize, ny as usize) {
                            seen.set(nx as usize, ny as usize, true);
                            queue.push_back((nx as usize, ny as usize));
                        }
                    }
                }
            }
            out.push(comp);
        }
    }
    out
}

fn centroid(pixels: &[(usize, usize)]) -> [f64; 2] {
    let n = pixels.len() as f64;
    let (sx, sy) = pixels.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64, b + y as f64));
    [sx / n, sy / n]
}

fn projected_centroid(points: &[LabeledPoint], cam: &CameraSpec) -> Result<[f64; 2], PipelineError> {
    let mut s = [0.0, 0.0];
    for p in points {
        let q = cam.project_point(p.position)?;
        s[0] += q[0];
        s[1] += q[1];
    }
    Ok([s[0] / points.len() as f64, s[1] / points.len() as f64])
}

fn spread(points: &[[f64; 2]], c: [f64; 2]) -> f64 {
    let ss: f64 = points.iter().map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sum();
    (ss / points.len() as f64).sqrt().max(1.0)
}

/// Splits each frame's foreground pixels among objects. A connected
/// component goes to the object whose last known image centroid is nearest,
/// unless several objects' centroids fall inside it; then each pixel goes
/// to the nearest of those, with distances scaled by each object's image
/// spread and pixels whose intensity the object cannot produce excluded.
/// Anchors start at the projected initial poses.
fn assign_pixels(
    clip: &VideoClip,
    scene: &SceneSpec,
    cam: &CameraSpec,
) -> Result<Vec<Vec<Vec<(usize, usize)>>>, PipelineError> {
    let mut anchors = Vec::with_capacity(scene.objects.len());
    let mut scales = Vec::with_capacity(scene.objects.len());
    for o in &scene.objects {
        let pts = posed_points(&o.model(), &o.initial(), o.shape_scale, o.placement)?;
        let c = projected_centroid(&pts, cam)?;
        let proj = pts
            .iter()
            .map(|p| cam.project_point(p.position).map(|q| [q[0], q[1]]))
            .collect::<Result<Vec<_>, _>>()?;
        anchors.push(c);
        scales.push(spread(&proj, c));
    }
    let part_counts: Vec<u8> = scene.objects.iter().map(|o| o.model().part_count).collect();
    let produces = |k: usize, v: u8| {
        label_from_intensity(v, part_counts[k]).is_some_and(|l| part_intensity(l, part_counts[k]) == v)
    };
    let mut out = vec![Vec::with_capacity(clip.len()); scene.objects.len()];
    for frame in &clip.frames {
        let mut per_object: Vec<Vec<(usize, usize)>> = vec![Vec::new(); scene.objects.len()];
        for comp in components(frame) {
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for &(x, y) in &comp {
                x0 = x0.min(x as f64);
                y0 = y0.min(y as f64);
                x1 = x1.max(x as f64);
                y1 = y1.max(y as f64);
            }
            let inside: Vec<usize> = (0..anchors.len())
                .filter(|&k| {
                    let [u, v] = anchors[k];
                    u >= x0 - 2.0 && u <= x1 + 2.0 && v >= y0 - 2.0 && v <= y1 + 2.0
                })
                .collect();
            let dist = |k: usize, p: [f64; 2]| ((anchors[k][0] - p[0]).powi(2) + (anchors[k][1] - p[1]).powi(2)).sqrt();
            if inside.len() <= 1 {
                let c = centroid(&comp);
                let best = (0..anchors.len())
                    .min_by(|&a, &b| dist(a, c).total_cmp(&dist(b, c)))
                    .expect("at least one object");
                per_object[best].extend(comp);
                continue;
            }
            for (x, y) in comp {
                let v = *frame.get(x, y);
                let p = [x as f64, y as f64];
                let key = |k: usize| (!produces(k, v), dist(k, p) / scales[k]);
                let best = inside
                    .iter()
                    .copied()
                    .min_by(|&a, &b| key(a).partial_cmp(&key(b)).expect("finite distances"))
                    .expect("several candidates");
                per_object[best].push((x, y));
            }
        }
        for (k, px) in per_object.into_iter().enumerate() {
            if !px.is_empty() {
                anchors[k] = centroid(&px);
                let pts: Vec<[f64; 2]> = px.iter().map(|&(x, y)| [x as f64, y as f64]).collect();
                scales[k] = spread(&pts, anchors[k]);
            }
            out[k].push(px);
        }
    }
    Ok(out)
}

/// The 21 points of a generic object from its pixels. The splat renderer
/// grows silhouettes by its splat radius, so contour points are pulled
/// toward the box center and the box is shrunk by that radius.
fn extract_object(
    pixels: &[(usize, usize)],
    obj: &SceneObject,
    cam: &CameraSpec,
    splat_radius: f64,
) -> Result<Vec<f64>, PipelineError> {
    let mut mask = Grid::filled(cam.width, cam.height, false);
    for &(x, y) in pixels {
        mask.set(x, y, true);
    }
    let bbox = BBox::of_mask(&mask).expect("pixels are non-empty");
    let depth = object_center(&obj.initial())[2];
    let o25 = object25d_from_mask(&mask, bbox, &DepthMap::constant(cam.width, cam.height, depth), cam)?;
    let inset = (splat_radius - 0.5).max(0.0) * depth / cam.focal;
    let center = o25.points[20];
    let mut pose = Vec::with_capacity(63);
    for (i, p) in o25.points.iter().enumerate() {
        let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
        let q = if i < 16 {
            let r = (dx * dx + dy * dy).sqrt();
            let k = if r > inset { (r - inset) / r } else { 0.0 };
            [center[0] + k * dx, center[1] + k * dy, p[2]]
        } else if i < 20 {
            let shrink = |d: f64| d - d.signum() * inset.min(d.abs());
            [center[0] + shrink(dx), center[1] + shrink(dy), p[2]]
        } else {
            *p
        };
        pose.extend_from_slice(&q);
    }
    Ok(pose)
}

/// How each model point shows up in a z-buffered render: the number of
/// pixels it wins and the offset of their centroid from its projection.
#[derive(Debug, Clone, Copy, Default)]
struct PointCoverage {
    pixels: usize,
    offset: [f64; 2],
}

fn coverage(
    spec: &ParametricModelSpec,
    pose: &[f64],
    obj: &SceneObject,
    cam: &CameraSpec,
    splat_radius: f64,
) -> Result<Vec<PointCoverage>, PipelineError> {
    let pts = posed_points(spec, pose, obj.shape_scale, obj.placement)?;
    let zb = render_zbuffer(std::slice::from_ref(&pts), cam, splat_radius)?;
    let mut sums = vec![([0.0, 0.0], 0usize); pts.len()];
    for y in 0..zb.height {
        for x in 0..zb.width {
            if let Some(e) = zb.get(x, y) {
                let s = &mut sums[e.point];
                s.0[0] += x as f64;
                s.0[1] += y as f64;
                s.1 += 1;
            }
        }
    }
    pts.iter()
        .zip(sums)
        .map(|(p, (s, n))| {
            if n == 0 {
                return Ok(PointCoverage::default());
            }
            let q = cam.project_point(p.position)?;
            Ok(PointCoverage { pixels: n, offset: [s[0] / n as f64 - q[0], s[1] / n as f64 - q[1]] })
        })
        .collect()
}

/// Predicted pixel centroid per label: each point counts with the pixels it
/// covered in the render at the linearization pose, shifted by that
/// coverage's offset. Labels with no covered pixels fall back to the plain
/// mean of their projected points.
fn model_centroids(
    spec: &ParametricModelSpec,
    pose: &[f64],
    obj: &SceneObject,
    cam: &CameraSpec,
    labels: &[u8],
    cover: &[PointCoverage],
) -> Result<Vec<[f64; 2]>, PipelineError> {
    let pts = posed_points(spec, pose, obj.shape_scale, obj.placement)?;
    let mut proj = Vec::with_capacity(pts.len());
    for p in &pts {
        let q = cam.project_point(p.position)?;
        proj.push((p.label, [q[0], q[1]]));
    }
    Ok(labels
        .iter()
        .map(|&l| {
            let (mut s, mut w) = ([0.0, 0.0], 0.0);
            for (&(pl, q), c) in proj.iter().zip(cover) {
                if pl == l && c.pixels > 0 {
                    let k = c.pixels as f64;
                    s[0] += k * (q[0] + c.offset[0]);
                    s[1] += k * (q[1] + c.offset[1]);
                    w += k;
                }
            }
            if w == 0.0 {
                for &(pl, q) in &proj {
                    if pl == l {
                        s[0] += q[0];
                        s[1] += q[1];
                        w += 1.0;
                    }
                }
            }
            if w == 0.0 {
                [0.0, 0.0]
            } else {
                [s[0] / w, s[1] / w]
            }
        })
        .collect())
}

/// Fits one articulated pose to observed per-label pixel centroids with
/// damped Gauss-Newton, regularized toward `prior`. Only in-plane (z-axis)
/// joint rotations are fitted; the out-of-plane angles are not observable
/// from one view and keep their prior values.
fn fit_pose(
    obj: &SceneObject,
    cam: &CameraSpec,
    splat_radius: f64,
    observed: &[(u8, [f64; 2], usize)],
    prior: &[f64],
) -> Result<Vec<f64>, PipelineError> {
    let spec = obj.model();
    let labels: Vec<u8> = observed.iter().map(|o| o.0).collect();
    let target: Vec<f64> = observed.iter().flat_map(|o| o.1).collect();
    // Centroids of barely visible parts are unreliable.
    let weight: Vec<f64> = observed
        .iter()
        .flat_map(|o| {
            let w = (o.2 as f64 / (o.2 as f64 + IK_SLIVER)).sqrt();
            [w, w]
        })
        .collect();
    let free: Vec<usize> = (0..spec.joint_count()).map(|j| 3 * j + 2).collect();
    let n = free.len();
    let mut theta = prior.to_vec();
    let h = 1e-5;
    for _ in 0..IK_ITERATIONS {
        let cover = coverage(&spec, &theta, obj, cam, splat_radius)?;
        let residual = |t: &[f64]| -> Result<Vec<f64>, PipelineError> {
            let c = model_centroids(&spec, t, obj, cam, &labels, &cover)?;
            Ok(c.iter().flatten().zip(&target).zip(&weight).map(|((m, o), w)| w * (m - o)).collect())
        };
        let r0 = DVector::from_vec(residual(&theta)?);
        let mut jac = DMatrix::<f64>::zeros(r0.len(), n);
        for (col, &j) in free.iter().enumerate() {
            let mut tp = theta.clone();
            tp[j] += h;
            let mut tm = theta.clone();
            tm[j] -= h;
            let (rp, rm) = (residual(&tp)?, residual(&tm)?);
            for i in 0..r0.len() {
                jac[(i, col)] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        let dev = DVector::from_iterator(n, free.iter().map(|&j| theta[j] - prior[j]));
        let a = jac.transpose() * &jac + DMatrix::<f64>::identity(n, n) * IK_DAMPING;
        let g = jac.transpose() * &r0 + dev * IK_DAMPING;
        let Some(mut step) = a.cholesky().map(|c| c.solve(&g)) else { break };
        let largest = step.amax();
        if largest > IK_MAX_STEP {
            step *= IK_MAX_STEP / largest;
        }
        for (&j, s) in free.iter().zip(step.iter()) {
            theta[j] -= s;
        }
        if step.norm() < 1e-9 {
            break;
        }
    }
    Ok(theta)
}

/// Fills frames with no observation by linear interpolation between the
/// nearest observed frames (holding the ends).
fn fill_missing(frames: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    let known: Vec<usize> = (0..frames.len()).filter(|&i| frames[i].is_some()).collect();
    (0..frames.len())
        .map(|i| {
            if let Some(f) = &frames[i] {
                return f.clone();
            }
            let next = known.iter().copied().find(|&k| k > i);
            let prev = known.iter().copied().rev().find(|&k| k < i);
            match (prev, next) {
                (Some(a), Some(b)) => {
                    let t = (i - a) as f64 / (b - a) as f64;
                    let (fa, fb) = (frames[a].as_ref().unwrap(), frames[b].as_ref().unwrap());
                    fa.iter().zip(fb).map(|(x, y)| x + t * (y - x)).collect()
                }
                (Some(a), None) => frames[a].clone().unwrap(),
                (None, Some(b)) => frames[b].clone().unwrap(),
                (None, None) => unreachable!("at least one frame is known"),
            }
        })
        .collect()
}

/// Reads per-object motion off a clip rendered by the synthetic generator
/// with `config`. Depth comes from scene placement metadata, since the
/// renderer encodes none in its pixels.
pub fn extract_motion(
    clip: &VideoClip,
    scene: &SceneSpec,
    config: &GeneratorConfig,
) -> Result<Vec<MotionSequence>, PipelineError> {
    let cam = config.camera(&scene.camera);
    if clip.width != cam.width || clip.height != cam.height || clip.is_empty() {
        return Err(PipelineError::ShapeMismatch(format!(
            "clip is {}x{}, generator config renders {}x{}",
            clip.width, clip.height, cam.width, cam.height
        )));
    }
    let radius = config.splat_radius(&scene.camera);
    let assigned = assign_pixels(clip, scene, &cam)?;
    let mut out = Vec::with_capacity(scene.objects.len());
    for (k, obj) in scene.objects.iter().enumerate() {
        let missing = assigned[k].iter().filter(|p| p.is_empty()).count();
        if 4 * missing >= clip.len() {
            return Err(PipelineError::ExtractionFailed { object: k, missing, frames: clip.len() });
        }
        let spec = obj.model();
        let mut frames: Vec<Option<Vec<f64>>> = Vec::with_capacity(clip.len());
        let mut prior = obj.initial();
        for (f, pixels) in assigned[k].iter().enumerate() {
            if pixels.is_empty() {
                frames.push(None);
                continue;
            }
            let pose = if spec.is_articulated() {
                let mut sums = vec![([0.0, 0.0], 0usize); spec.part_count as usize + 1];
                for &(x, y) in pixels {
                    if let Some(l) = label_from_intensity(*clip.frames[f].get(x, y), spec.part_count) {
                        let s = &mut sums[l as usize];
                        s.0[0] += x as f64;
                        s.0[1] += y as f64;
                        s.1 += 1;
                    }
                }
                let observed: Vec<(u8, [f64; 2], usize)> = sums
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.1 > 0)
                    .map(|(l, s)| (l as u8, [s.0[0] / s.1 as f64, s.0[1] / s.1 as f64], s.1))
                    .collect();
                fit_pose(obj, &cam, radius, &observed, &prior)?
            } else {
                extract_object(pixels, obj, &cam, radius)?
            };
            prior = pose.clone();
            frames.push(Some(pose));
        }
        let fps = clip.fps;
        out.push(MotionSequence::new(spec, fps, fill_missing(frames)));
    }
    Ok(out)
}

/// Refines each object's motion with the prior, conditioned on the object's
/// tags and the motion's own mean strength.
pub fn refine_motions(
    pmp: &PmpModel,
    scene: &SceneSpec,
    motions: &[MotionSequence],
) -> Result<(Vec<MotionStrength>, Vec<MotionSequence>), PipelineError> {
    let mut strengths = Vec::with_capacity(motions.len());
    let mut refined = Vec::with_capacity(motions.len());
    for (m, obj) in motions.iter().zip(&scene.objects) {
        refined.push(refine_with_tags(pmp, m, &obj.conditioning_tags())?);
        strengths.push(motion_strength(m)?);
    }
    Ok((strengths, refined))
}

pub fn stage2_optimize(
    clip: &VideoClip,
    scene: &SceneSpec,
    config: &RevisionConfig,
    pmp: &PmpModel,
) -> Result<Stage2Output, PipelineError> {
    let extracted = extract_motion(clip, scene, &config.coarse)?;
    let frames = config.fine.frame_count(scene.duration);
    let fps = scene.fps * frames as f64 / scene.duration as f64;
    let raw = extracted
        .iter()
        .map(|m| {
            let mut r = if m.len() >= 2 { resample(m, frames)? } else { MotionSequence::constant(m.model.clone(), fps, &m.frames[0], frames) };
            r.fps = fps;
            Ok(r)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let (strength, refined) = refine_motions(pmp, scene, &raw)?;
    Ok(Stage2Output { extracted, raw, strength, refined })
}

/// Full-motion channels from refined motion at the fine generator's
/// resolution.
pub fn motion_channels(
    scene: &SceneSpec,
    motions: &[MotionSequence],
    config: &RevisionConfig,
) -> Result<ConditionChannels, PipelineError> {
    let frames = config.fine.frame_count(scene.duration);
    if motions.iter().any(|m| m.len() != frames) || motions.len() != scene.objects.len() {
        return Err(PipelineError::ShapeMismatch(format!("refined motions must have {frames} frames per object")));
    }
    let per_frame = (0..frames).map(|f| frame_points(scene, motions, f)).collect::<Result<Vec<_>, _>>()?;
    let payload = ConditionPayload::FullMotion {
        frames: per_frame,
        camera: config.fine.camera(&scene.camera),
        splat_radius: config.fine.splat_radius(&scene.camera),
    };
    Ok(build_condition(ConditionMode::FullMotion, &payload, config.confidence_triple)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage3Output {
    pub channels: ConditionChannels,
    pub clip: VideoClip,
    pub realized: Vec<MotionSequence>,
}

pub fn stage3_regenerate(
    generator: &dyn VideoGenerator,
    scene: &SceneSpec,
    refined: &[MotionSequence],
    config: &RevisionConfig,
    seed: u64,
) -> Result<Stage3Output, PipelineError> {
    let channels = motion_channels(scene, refined, config)?;
    let (clip, realized) = generator.generate(scene, &channels, &config.fine, seed)?;
    Ok(Stage3Output { channels, clip, realized })
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RevisionRun {
    pub stage1: Stage1Output,
    pub stage2: Stage2Output,
    pub stage3: Stage3Output,
    /// Final clip and realized motion against ground truth.
    pub report: EvalReport,
    /// Coarse clip and realized motion against ground truth at the coarse
    /// config.
    pub coarse_report: EvalReport,
    /// Stage-2 raw and refined motion error against fine ground truth.
    pub stage2_errors: Stage2Errors,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Errors {
    pub raw_traj_mse: f64,
    pub refined_traj_mse: f64,
}

#[derive(Serialize)]
struct RunFile<'a> {
    config: &'a RevisionConfig,
    seed: u64,
    scene: &'a SceneSpec,
    user_condition: &'a UserCondition,
}

/// Runs stages 1 to 3 with the synthetic generator and a loaded prior.
/// When `out_dir` is given, every intermediate is written there.
pub fn run_revision_with(
    generator: &dyn VideoGenerator,
    pmp: &PmpModel,
    scene: &SceneSpec,
    user: &UserCondition,
    config: &RevisionConfig,
    out_dir: Option<&Path>,
) -> Result<RevisionRun, PipelineError> {
    config.validate()?;
    scene.validate()?;
    let seed = config.seed;
    let s1 = stage1_coarse(generator, scene, user, config, rng::derive(seed, 1)).map_err(PipelineError::stage(1))?;
    let s2 = stage2_optimize(&s1.clip, scene, config, pmp).map_err(PipelineError::stage(2))?;
    let s3 = stage3_regenerate(generator, scene, &s2.refined, config, rng::derive(seed, 3))
        .map_err(PipelineError::stage(3))?;
    let report = evaluate_against_gt(scene, &config.fine, &s3.clip, &s3.realized)?;
    let coarse_report = evaluate_against_gt(scene, &config.coarse, &s1.clip, &s1.realized)?;
    let gt_fine = gt_for_config(scene, &config.fine)?;
    let stage2_errors = Stage2Errors {
        raw_traj_mse: traj_mse(&s2.raw, &gt_fine)?,
        refined_traj_mse: traj_mse(&s2.refined, &gt_fine)?,
    };
    let run = RevisionRun { stage1: s1, stage2: s2, stage3: s3, report, coarse_report, stage2_errors };
    if let Some(dir) = out_dir {
        write_run(dir, scene, user, config, &run)?;
    }
    Ok(run)
}

/// Loads the prior from `config.pmp_checkpoint` and runs the synthetic
/// pipeline.
pub fn run_revision(
    scene: &SceneSpec,
    user: &UserCondition,
    config: &RevisionConfig,
    out_dir: Option<&Path>,
) -> Result<RevisionRun, PipelineError> {
    let pmp = load_checkpoint(&config.pmp_checkpoint)?;
    run_revision_with(&SyntheticGenerator, &pmp, scene, user, config, out_dir)
}

fn write_run(
    dir: &Path,
    scene: &SceneSpec,
    user: &UserCondition,
    config: &RevisionConfig,
    run: &RevisionRun,
) -> Result<(), PipelineError> {
    write_json(&dir.join("run.json"), &RunFile { config, seed: config.seed, scene, user_condition: user })?;
    let coarse = dir.join("coarse");
    std::fs::create_dir_all(&coarse).map_err(|source| IoError::Io { path: coarse.display().to_string(), source })?;
    run.stage1.clip.write_dir(&coarse)?;
    write_motion_set(&coarse.join("realized.json"), &run.stage1.realized)?;
    write_json(&coarse.join("report.json"), &run.coarse_report)?;
    let s2 = dir.join("stage2");
    write_motion_set(&s2.join("extracted.json"), &run.stage2.extracted)?;
    write_motion_set(&s2.join("raw.json"), &run.stage2.raw)?;
    write_motion_set(&s2.join("refined.json"), &run.stage2.refined)?;
    write_json(&s2.join("strength.json"), &run.stage2.strength)?;
    write_json(&s2.join("errors.json"), &run.stage2_errors)?;
    let channels = dir.join("channels");
    std::fs::create_dir_all(&channels)
        .map_err(|source| IoError::Io { path: channels.display().to_string(), source })?;
    write_channels(&channels, &run.stage3.channels)?;
    let fin = dir.join("final");
    std::fs::create_dir_all(&fin).map_err(|source| IoError::Io { path: fin.display().to_string(), source })?;
    run.stage3.clip.write_dir(&fin)?;
    write_motion_set(&fin.join("realized.json"), &run.stage3.realized)?;
    write_json(&dir.join("report.json"), &run.report)?;
    Ok(())
}

/// Named fixture scene: a single walking human.
pub fn walker_scene() -> SceneSpec {
    SceneSpec {
        name: "walker".into(),
        objects: vec![SceneObject {
            category: crate::motion::Category::Human,
            tags: vec!["walk".into()],
            shape_scale: 1.0,
            placement: [0.0, -0.05, 4.2],
            initial_pose: None,
            scripted: None,
        }],
        camera: crate::simgen::default_camera(),
        duration: 32,
        fps: 8.0,
        motion_seed: 7,
    }
}

/// The seeded fixture set: scene `i` has one to three objects.
pub fn fixture_scenes(count: usize) -> Vec<SceneSpec> {
    (0..count)
        .map(|i| {
            if i == 0 {
                return walker_scene();
            }
            let mut s = crate::simgen::random_scene(rng::derive(0xf1c5, i as u64), 1 + i % 3, 32);
            s.name = format!("fixture_{i:02}");
            s
        })
        .collect()
}

/// One synthetic training scene with its ground truth and the conditioning
/// mode drawn for it from the training mix.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub scene: SceneSpec,
    pub mode: ConditionMode,
    pub motions: Vec<MotionSequence>,
}

/// `count` random scenes of `objects` objects and `duration` frames. Scene
/// `i` comes from `derive(seed, i)`; modes come from one stream seeded by
/// `derive(seed, count)`.
pub fn generate_corpus(
    count: usize,
    objects: usize,
    duration: usize,
    mix: [f64; 3],
    seed: u64,
) -> Result<Vec<CorpusEntry>, PipelineError> {
    let mut modes = rng::seeded(rng::derive(seed, count as u64));
    (0..count)
        .map(|i| {
            let scene = crate::simgen::random_scene(rng::derive(seed, i as u64), objects, duration);
            let motions = crate::simgen::scene_gt(&scene)?;
            Ok(CorpusEntry { scene, mode: sample_condition_mode(mix, &mut modes), motions })
        })
        .collect()
}

/// Flattens corpus scenes into per-object prior training items tagged
/// with each object's conditioning words.
pub fn pmp_items(entries: &[CorpusEntry]) -> Vec<CorpusItem> {
    entries
        .iter()
        .flat_map(|e| {
            e.scene
                .objects
                .iter()
                .zip(&e.motions)
                .map(|(o, m)| CorpusItem { motion: m.clone(), tags: o.conditioning_tags() })
        })
        .collect()
}

/// Refines one motion conditioned on `tags` and its own strength.
pub fn refine_with_tags(pmp: &PmpModel, motion: &MotionSequence, tags: &[String]) -> Result<MotionSequence, PipelineError> {
    let cond = Conditioning {
        tokens: pmp.config.encode_tokens(tags)?,
        strength: motion_strength(motion)?.mean,
        category: motion.category(),
    };
    Ok(pmp.refine(motion, &cond)?)
}
