//! The video-generator seam and a synthetic stand-in generator.
//!
//! The synthetic generator knows the scene's latent ground-truth motion,
//! corrupts it in proportion to how weakly it is conditioned, and splats the
//! result into grayscale frames whose intensity encodes the part label.

use std::f64::consts::TAU;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{render_zbuffer, CameraSpec, ConditionChannels, ConditionMode, GeometryError};
use crate::grid::Grid;
use crate::io::{read_json, read_pgm8, write_json, write_pgm8, IoError};
use crate::motion::{
    disc_object_pose, object_point, posed_points, resample, Category, MotionError, MotionSequence,
    ParametricModelSpec, OBJECT_POINTS,
};
use crate::perturb::{perturb, PerturbConfig, PerturbError, ScheduleSpec, SegmentRange};
use crate::rng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown action tag {0:?}")]
    UnknownActionTag(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Radius of a generic object at `shape_scale` 1, in scene units.
pub const OBJECT_RADIUS: f64 = 0.25;
/// Splat radius in pixels at a 128-pixel-wide render; scaled with width.
pub const SPLAT_RADIUS: f64 = 3.0;
/// Render width at which [`SPLAT_RADIUS`] applies.
pub const SPLAT_REFERENCE_WIDTH: f64 = 128.0;

pub fn splat_radius_for(width: usize) -> f64 {
    SPLAT_RADIUS * width as f64 / SPLAT_REFERENCE_WIDTH
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: Category,
    /// Action tag plus optional `slow` / `fast` modifier and category words.
    pub tags: Vec<String>,
    #[serde(default = "one")]
    pub shape_scale: f64,
    /// Root position for articulated models; disc center for generic objects.
    pub placement: [f64; 3],
    #[serde(default)]
    pub initial_pose: Option<Vec<f64>>,
    /// Explicit per-frame poses that replace the procedural motion.
    #[serde(default)]
    pub scripted: Option<Vec<Vec<f64>>>,
}

impl SceneObject {
    pub fn model(&self) -> Arc<ParametricModelSpec> {
        ParametricModelSpec::preset(self.category)
    }

    /// Tags plus the category word, as fed to the motion prior.
    pub fn conditioning_tags(&self) -> Vec<String> {
        let word = category_word(self.category);
        let mut tags = self.tags.clone();
        if !tags.iter().any(|t| t == word) {
            tags.push(word.to_string());
        }
        tags
    }

    pub fn radius(&self) -> f64 {
        OBJECT_RADIUS * self.shape_scale
    }

    pub fn initial(&self) -> Vec<f64> {
        if let Some(p) = &self.initial_pose {
            return p.clone();
        }
        if self.category.is_articulated() {
            vec![0.0; self.model().pose_dim]
        } else {
            disc_object_pose(self.placement, self.radius())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default)]
    pub name: String,
    pub objects: Vec<SceneObject>,
    pub camera: CameraSpec,
    /// Frame count of the full-length video.
    pub duration: usize,
    pub fps: f64,
    /// Seed for the procedural ground-truth motion.
    #[serde(default)]
    pub motion_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScene(m));
        self.camera.validate()?;
        if self.duration == 0 || !(self.fps > 0.0) {
            return bad(format!("duration {} / fps {} must be positive", self.duration, self.fps));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let model = o.model();
            if !(o.shape_scale > 0.0) {
                return bad(format!("object {i}: shape_scale must be positive"));
            }
            if o.placement[2] <= 0.0 {
                return bad(format!("object {i}: placement depth must be positive"));
            }
            if o.initial_pose.as_ref().is_some_and(|p| p.len() != model.pose_dim) {
                return bad(format!("object {i}: initial pose must have {} values", model.pose_dim));
            }
            if let Some(s) = &o.scripted {
                if s.len() != self.duration || s.iter().any(|f| f.len() != model.pose_dim) {
                    return bad(format!("object {i}: scripted motion must be {} x {}", self.duration, model.pose_dim));
                }
            }
        }
        Ok(())
    }

    pub fn base_camera(&self) -> CameraSpec {
        self.camera
    }
}

/// Default base camera: 256 x 144 pixels, focal length 300.
pub fn default_camera() -> CameraSpec {
    CameraSpec::centered(300.0, 256, 144)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    /// Noise standard deviation per channel at full corruption.
    pub noise_level: f64,
    pub shuffle_prob: f64,
    pub drop_prob: f64,
}

impl Default for Corruption {
    fn default() -> Self {
        Self { noise_level: 0.1, shuffle_prob: 0.5, drop_prob: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub resolution_scale: f64,
    pub frame_fraction: f64,
    pub steps: usize,
    pub corruption: Corruption,
    /// Piecewise-linear map from normalized confidence (0 = empty value,
    /// 1 = full-motion value) to corruption attenuation, as sorted
    /// `(confidence, attenuation)` knots.
    pub condition_fidelity: Vec<(f64, f64)>,
}

fn default_fidelity() -> Vec<(f64, f64)> {
    vec![(0.0, 1.0), (0.5, 0.4), (1.0, 0.02)]
}

impl GeneratorConfig {
    pub fn coarse() -> Self {
        Self {
            resolution_scale: 0.25,
            frame_fraction: 0.5,
            steps: 32,
            corruption: Corruption::default(),
            condition_fidelity: default_fidelity(),
        }
    }

    pub fn fine() -> Self {
        Self { resolution_scale: 1.0, frame_fraction: 1.0, steps: 50, ..Self::coarse() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if !(self.resolution_scale > 0.0 && self.resolution_scale <= 1.0) {
            return bad(format!("resolution_scale {} outside (0, 1]", self.resolution_scale));
        }
        if !(self.frame_fraction > 0.0 && self.frame_fraction <= 1.0) {
            return bad(format!("frame_fraction {} outside (0, 1]", self.frame_fraction));
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        let c = &self.corruption;
        if !(0.0..1.0).contains(&c.noise_level)
            || !(0.0..=1.0).contains(&c.shuffle_prob)
            || !(0.0..=1.0).contains(&c.drop_prob)
        {
            return bad(format!("corruption {c:?} out of range"));
        }
        let f = &self.condition_fidelity;
        if f.is_empty() {
            return bad("condition_fidelity is empty".into());
        }
        for w in f.windows(2) {
            if !(w[1].0 > w[0].0) {
                return bad("condition_fidelity knots must be strictly increasing".into());
            }
            if w[1].1 > w[0].1 {
                return bad("attenuation must not increase with confidence".into());
            }
        }
        if f.iter().any(|&(_, a)| !(0.0..=1.0).contains(&a)) {
            return bad("attenuation must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Attenuation for a normalized confidence, clamped at the end knots.
    pub fn attenuation(&self, confidence: f64) -> f64 {
        let f = &self.condition_fidelity;
        if confidence <= f[0].0 {
            return f[0].1;
        }
        for w in f.windows(2) {
            if confidence <= w[1].0 {
                let t = (confidence - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + t * (w[1].1 - w[0].1);
            }
        }
        f[f.len() - 1].1
    }

    pub fn frame_count(&self, duration: usize) -> usize {
        ((duration as f64 * self.frame_fraction).ceil() as usize).max(1)
    }

    pub fn camera(&self, base: &CameraSpec) -> CameraSpec {
        base.scaled(self.resolution_scale)
    }

    pub fn splat_radius(&self, base: &CameraSpec) -> f64 {
        splat_radius_for(self.camera(base).width)
    }
}

/// Grayscale frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Grid<u8>>,
    pub fps: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClipFile {
    fps: f64,
    resolution: [usize; 2],
    frames: usize,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Writes `frame_%04d.pgm` files and `clip.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), IoError> {
        for (i, f) in self.frames.iter().enumerate() {
            write_pgm8(&dir.join(format!("frame_{i:04}.pgm")), f)?;
        }
        write_json(
            &dir.join("clip.json"),
            &ClipFile { fps: self.fps, resolution: [self.width, self.height], frames: self.frames.len() },
        )
    }

    pub fn read_dir(dir: &Path) -> Result<VideoClip, IoError> {
        let meta: ClipFile = read_json(&dir.join("clip.json"))?;
        let frames = (0..meta.frames)
            .map(|i| read_pgm8(&dir.join(format!("frame_{i:04}.pgm"))))
            .collect::<Result<Vec<_>, _>>()?;
        for f in &frames {
            if f.width != meta.resolution[0] || f.height != meta.resolution[1] {
                return Err(IoError::Format {
                    path: dir.display().to_string(),
                    reason: format!("frame is {}x{}, clip.json says {:?}", f.width, f.height, meta.resolution),
                });
            }
        }
        Ok(VideoClip { frames, fps: meta.fps, width: meta.resolution[0], height: meta.resolution[1] })
    }
}

/// Action words understood by [`synthesize_gt_motion`].
pub const ACTIONS: [&str; 5] = ["static", "walk", "reach", "drop", "slide"];
pub fn category_word(category: Category) -> &'static str {
    match category {
        Category::Human => "human",
        Category::Animal => "animal",
        Category::GenericObject => "object",
    }
}

/// Words accepted in tags without affecting motion.
const NEUTRAL: [&str; 3] = ["human", "animal", "object"];

/// Actions available for a category.
pub fn actions_for(category: Category) -> &'static [&'static str] {
    if category.is_articulated() {
        &["static", "walk", "reach"]
    } else {
        &["static", "walk", "reach", "drop", "slide"]
    }
}

/// Base walking period in frames; `slow` and `fast` scale it.
pub const WALK_PERIOD: f64 = 16.0;
/// Total vertical fall of a dropped object over the clip, in scene units.
pub const DROP_DISTANCE: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Action {
    name: &'static str,
    speed: f64,
}

fn parse_action(tags: &[String], category: Category) -> Result<Action, SimError> {
    let mut name = None;
    let mut speed = 1.0;
    for t in tags {
        match t.as_str() {
            "slow" => speed = 0.6,
            "fast" => speed = 1.6,
            w if NEUTRAL.contains(&w) => {}
            w => match ACTIONS.iter().find(|a| **a == w) {
                Some(a) if actions_for(category).contains(a) && name.is_none() => name = Some(*a),
                _ => return Err(SimError::UnknownActionTag(format!("{w} (for {})", category.name()))),
            },
        }
    }
    Ok(Action { name: name.unwrap_or("static"), speed })
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Per-joint z-rotation channels driven by the walk cycle:
/// `(joint, amplitude factor, phase offset)`.
fn walk_channels(category: Category) -> &'static [(usize, f64, f64)] {
    match category {
        Category::Human => &[
            (0, 0.15, 0.0),
            (1, 1.0, 0.0),
            (2, -1.0, 0.0),
            (4, 0.6, 0.8),
            (5, -0.6, 0.8),
            (16, 0.7, std::f64::consts::PI),
            (17, -0.7, std::f64::consts::PI),
            (18, 0.4, 2.5),
            (19, -0.4, 2.5),
        ],
        Category::Animal => &[
            (7, 0.8, 0.0),
            (9, -0.8, 0.0),
            (11, -0.8, 0.0),
            (13, 0.8, 0.0),
            (5, 0.5, 1.5),
            (3, 0.2, 0.4),
        ],
        Category::GenericObject => &[],
    }
}

/// Joint z-rotation targets for `reach`: `(joint, lower, upper)`.
fn reach_targets(category: Category) -> &'static [(usize, f64, f64)] {
    match category {
        Category::Human => &[(17, 0.6, 1.3), (19, 0.2, 0.9), (16, -0.6, 0.2), (3, -0.2, 0.2)],
        Category::Animal => &[(3, 0.4, 0.9), (4, 0.1, 0.5), (7, -0.9, -0.4)],
        Category::GenericObject => &[],
    }
}

fn translate_disc(initial: &[f64], dx: f64, dy: f64) -> Vec<f64> {
    let mut out = initial.to_vec();
    for i in 0..OBJECT_POINTS {
        out[3 * i] += dx;
        out[3 * i + 1] += dy;
    }
    out
}

fn object_motion(obj: &SceneObject, duration: usize, fps: f64, seed: u64) -> Result<MotionSequence, SimError> {
    let model = obj.model();
    if let Some(frames) = &obj.scripted {
        return Ok(MotionSequence::new(model, fps, frames.clone()));
    }
    let action = parse_action(&obj.tags, obj.category)?;
    let mut r = rng::seeded(seed);
    let init = obj.initial();
    let n = duration;
    let u = |i: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let frames: Vec<Vec<f64>> = match (action.name, obj.category.is_articulated()) {
        ("static", _) => vec![init; n],
        ("walk", true) => {
            let amp = r.random_range(0.35..0.6) * action.speed.sqrt();
            let phase = r.random_range(0.0..TAU);
            let omega = TAU * action.speed / WALK_PERIOD;
            (0..n)
                .map(|i| {
                    let mut f = init.clone();
                    for &(j, k, off) in walk_channels(obj.category) {
                        f[3 * j + 2] += amp * k * (omega * i as f64 + phase + off).sin();
                    }
                    f
                })
                .collect()
        }
        ("walk", false) => {
            // Hopping: horizontal sway and a periodic lift.
            let (ax, ay) = (r.random_range(0.1..0.25), r.random_range(0.1..0.25));
            let phase = r.random_range(0.0..TAU);
            let omega = TAU * action.speed / WALK_PERIOD;
            (0..n)
                .map(|i| {
                    let a = omega * i as f64;
                    let dx = ax * ((a + phase).sin() - phase.sin());
                    let dy = -ay * (1.0 - a.cos()) / 2.0;
                    translate_disc(&init, dx, dy)
                })
                .collect()
        }
        ("reach", true) => {
            let targets: Vec<(usize, f64)> = reach_targets(obj.category)
                .iter()
                .map(|&(j, lo, hi)| (j, r.random_range(lo..hi) * action.speed.min(1.2)))
                .collect();
            (0..n)
                .map(|i| {
                    let s = smoothstep(u(i));
                    let mut f = init.clone();
                    for &(j, target) in &targets {
                        f[3 * j + 2] += s * target;
                    }
                    f
                })
                .collect()
        }
        ("reach", false) => {
            let dx = r.random_range(0.2..0.6) * if r.random::<bool>() { 1.0 } else { -1.0 } * action.speed;
            let dy = r.random_range(-0.3..0.3) * action.speed;
            (0..n).map(|i| translate_disc(&init, smoothstep(u(i)) * dx, smoothstep(u(i)) * dy)).collect()
        }
        ("drop", false) => {
            // Constant acceleration from rest: y_i = y_0 + g i^2 / 2.
            let denom = ((n.max(2) - 1) as f64).powi(2);
            let g = 2.0 * DROP_DISTANCE * action.speed.min(1.0) / denom;
            (0..n).map(|i| translate_disc(&init, 0.0, 0.5 * g * (i * i) as f64)).collect()
        }
        ("slide", false) => {
            let dir = if r.random::<bool>() { 1.0 } else { -1.0 };
            let dist = r.random_range(0.3..0.7) * action.speed * dir;
            (0..n).map(|i| translate_disc(&init, dist * u(i), 0.0)).collect()
        }
        (other, _) => return Err(SimError::UnknownActionTag(other.to_string())),
    };
    Ok(MotionSequence::new(model, fps, frames))
}

/// Deterministic procedural ground-truth motion, one sequence per object.
pub fn synthesize_gt_motion(scene: &SceneSpec, seed: u64) -> Result<Vec<MotionSequence>, SimError> {
    scene.validate()?;
    scene
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| object_motion(o, scene.duration, scene.fps, rng::derive(seed, i as u64)))
        .collect()
}

/// The scene's latent ground truth: [`synthesize_gt_motion`] with the
/// scene's own motion seed.
pub fn scene_gt(scene: &SceneSpec) -> Result<Vec<MotionSequence>, SimError> {
    synthesize_gt_motion(scene, scene.motion_seed)
}

/// Attenuation implied by condition channels: the labeled pixels' mean
/// confidence, normalized against the triple, mapped through
/// `condition_fidelity`.
pub fn channel_attenuation(channels: &ConditionChannels, config: &GeneratorConfig) -> f64 {
    let c = channels.triple.normalized(channels.labeled_confidence());
    config.attenuation(c)
}

/// Corrupts `gt` with a composed perturbation (noise of standard deviation
/// `noise_level`, then shuffle and drop-repeat with their probabilities)
/// blended in by the attenuation implied by `channels`:
/// `gt + a * (perturbed - gt)`.
///
/// The first frame always equals the ground truth (the generator is given
/// the first frame). Under target-pose conditioning the final frame's error
/// is clamped per channel to `noise_level / 10`.
pub fn corrupt_motion(
    gt: &MotionSequence,
    channels: &ConditionChannels,
    config: &GeneratorConfig,
    seed: u64,
) -> Result<MotionSequence, SimError> {
    config.validate()?;
    gt.ensure_valid()?;
    let att = channel_attenuation(channels, config);
    if att == 0.0 {
        return Ok(gt.clone());
    }
    let c = config.corruption;
    let mut pc = PerturbConfig {
        probabilities: [1.0, c.shuffle_prob, c.drop_prob],
        noise_steps: (1, 1),
        shuffle: SegmentRange { min: 2, max_fraction: 0.25 },
        drop: SegmentRange { min: 1, max_fraction: 0.25 },
        compose: true,
        ..PerturbConfig::default()
    };
    if c.noise_level > 0.0 {
        pc.schedule = ScheduleSpec { steps: 1, start: c.noise_level * c.noise_level, end: c.noise_level * c.noise_level };
    } else {
        pc.probabilities[0] = 0.0;
        pc.schedule = ScheduleSpec { steps: 1, start: 0.5, end: 0.5 };
    }
    let (full, _) = perturb(gt, &pc, seed)?;
    let mut frames: Vec<Vec<f64>> = gt
        .frames
        .iter()
        .zip(&full.frames)
        .map(|(g, p)| g.iter().zip(p).map(|(a, b)| a + att * (b - a)).collect())
        .collect();
    frames[0] = gt.frames[0].clone();
    if channels.mode == ConditionMode::TargetPose {
        let tol = c.noise_level / 10.0;
        let last = frames.len() - 1;
        let g = &gt.frames[last];
        for (v, &t) in frames[last].iter_mut().zip(g) {
            *v = t + (*v - t).clamp(-tol, tol);
        }
    }
    Ok(gt.with_frames(frames))
}

/// Display intensity of part `label` on a model with `part_count` parts.
pub fn part_intensity(label: u8, part_count: u8) -> u8 {
    (64.0 + (191.0 * label as f64 / part_count as f64).round()).min(255.0) as u8
}

/// Inverse of [`part_intensity`]; `None` for background or impossible
/// values.
pub fn label_from_intensity(intensity: u8, part_count: u8) -> Option<u8> {
    if intensity == 0 {
        return None;
    }
    let l = ((intensity as f64 - 64.0) * part_count as f64 / 191.0).round();
    (l >= 1.0 && l <= part_count as f64).then_some(l as u8)
}

/// Per-object labeled world points for one frame of every motion.
pub fn frame_points(
    scene: &SceneSpec,
    motions: &[MotionSequence],
    frame: usize,
) -> Result<Vec<Vec<crate::motion::LabeledPoint>>, SimError> {
    scene
        .objects
        .iter()
        .zip(motions)
        .map(|(o, m)| Ok(posed_points(&m.model, &m.frames[frame], o.shape_scale, o.placement)?))
        .collect()
}

/// Splat-renders motions into grayscale frames at the config's resolution.
pub fn render_video(
    scene: &SceneSpec,
    motions: &[MotionSequence],
    config: &GeneratorConfig,
) -> Result<VideoClip, SimError> {
    config.validate()?;
    if motions.len() != scene.objects.len() {
        return Err(SimError::DimensionMismatch(format!(
            "{} motions for {} objects",
            motions.len(),
            scene.objects.len()
        )));
    }
    let frames = config.frame_count(scene.duration);
    for (m, o) in motions.iter().zip(&scene.objects) {
        if m.len() != frames || m.pose_dim() != o.model().pose_dim {
            return Err(SimError::DimensionMismatch(format!(
                "motion is {}x{}, expected {frames}x{}",
                m.len(),
                m.pose_dim(),
                o.model().pose_dim
            )));
        }
    }
    let camera = config.camera(&scene.camera);
    let radius = config.splat_radius(&scene.camera);
    let part_counts: Vec<u8> = scene.objects.iter().map(|o| o.model().part_count).collect();
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let points = frame_points(scene, motions, f)?;
        let z = render_zbuffer(&points, &camera, radius)?;
        out.push(z.map(|e| e.map_or(0, |e| part_intensity(e.label, part_counts[e.object]))));
    }
    Ok(VideoClip {
        frames: out,
        fps: scene.fps * frames as f64 / scene.duration as f64,
        width: camera.width,
        height: camera.height,
    })
}

/// Ground truth resampled to the config's frame count.
pub fn gt_for_config(scene: &SceneSpec, config: &GeneratorConfig) -> Result<Vec<MotionSequence>, SimError> {
    let frames = config.frame_count(scene.duration);
    scene_gt(scene)?
        .iter()
        .map(|m| {
            let mut r = if m.len() == frames { m.clone() } else { resample(m, frames)? };
            r.fps = scene.fps * frames as f64 / scene.duration as f64;
            Ok(r)
        })
        .collect()
}

/// Synthesize, corrupt, render. Returns the clip and the realized motions.
pub fn generate(
    scene: &SceneSpec,
    channels: &ConditionChannels,
    config: &GeneratorConfig,
    seed: u64,
) -> Result<(VideoClip, Vec<MotionSequence>), SimError> {
    config.validate()?;
    let gt = gt_for_config(scene, config)?;
    let frames = config.frame_count(scene.duration);
    if channels.frames() != frames {
        return Err(SimError::DimensionMismatch(format!(
            "channels have {} frames, generator produces {frames}",
            channels.frames()
        )));
    }
    let realized = gt
        .iter()
        .enumerate()
        .map(|(i, m)| corrupt_motion(m, channels, config, rng::derive(seed, i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let clip = render_video(scene, &realized, config)?;
    Ok((clip, realized))
}

/// The generator seam. A backend turns a scene, condition channels and a
/// generator config into a clip, and reports the motion it realized (used by
/// tests and evaluation only). Same inputs and seed must give the same clip.
pub trait VideoGenerator {
    fn generate(
        &self,
        scene: &SceneSpec,
        channels: &ConditionChannels,
        config: &GeneratorConfig,
        seed: u64,
    ) -> Result<(VideoClip, Vec<MotionSequence>), SimError>;
}

/// The synthetic backend: [`generate`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticGenerator;

impl VideoGenerator for SyntheticGenerator {
    fn generate(
        &self,
        scene: &SceneSpec,
        channels: &ConditionChannels,
        config: &GeneratorConfig,
        seed: u64,
    ) -> Result<(VideoClip, Vec<MotionSequence>), SimError> {
        generate(scene, channels, config, seed)
    }
}

/// Center point (index 20) of a generic-object pose.
pub fn object_center(pose: &[f64]) -> [f64; 3] {
    object_point(pose, OBJECT_POINTS - 1)
}

fn draw_scene(r: &mut rng::Rng, seed: u64, objects: usize, duration: usize) -> SceneSpec {
    let camera = default_camera();
    let slots = objects.max(1);
    let width = 2.0 / slots as f64;
    let crowd = (slots - 1) as f64;
    let objs = (0..objects)
        .map(|k| {
            let category = Category::ALL[r.random_range(0..3)];
            let actions = actions_for(category);
            let action = actions[r.random_range(1..actions.len())];
            let mut tags = vec![action.to_string()];
            match r.random_range(0..4) {
                0 => tags.push("slow".into()),
                1 => tags.push("fast".into()),
                _ => {}
            }
            let z = match category {
                Category::Human => r.random_range(3.8..4.6 + 0.5 * crowd),
                Category::Animal => r.random_range(3.0..3.8 + 0.5 * crowd),
                Category::GenericObject => r.random_range(3.0..4.5 + 0.5 * crowd),
            };
            // Fraction of the visible half-width at this depth.
            let half = camera.principal[0] / camera.focal * z;
            let slot = -1.0 + width * (k as f64 + 0.5) + r.random_range(-0.15..0.15) * width;
            let x = 0.8 * half * slot;
            let (placement, shape_scale) = match category {
                Category::Human => ([x, r.random_range(-0.1..0.0), z], r.random_range(0.9..1.1)),
                Category::Animal => ([x - 0.2, r.random_range(-0.1..0.1), z], r.random_range(0.9..1.2)),
                Category::GenericObject => {
                    let y = if action == "drop" { r.random_range(-0.55..-0.35) } else { r.random_range(-0.2..0.2) };
                    ([x, y, z], r.random_range(0.8..1.2))
                }
            };
            SceneObject { category, tags, shape_scale, placement, initial_pose: None, scripted: None }
        })
        .collect();
    SceneSpec {
        name: format!("scene_{seed}"),
        objects: objs,
        camera,
        duration,
        fps: 8.0,
        motion_seed: rng::derive(seed, 0x5eed),
    }
}

/// Pixel box swept by each object over the whole ground-truth motion,
/// grown by the splat radius.
pub fn swept_boxes(scene: &SceneSpec) -> Result<Vec<[f64; 4]>, SimError> {
    let gt = scene_gt(scene)?;
    let r = splat_radius_for(scene.camera.width);
    let mut boxes = vec![[f64::MAX, f64::MAX, f64::MIN, f64::MIN]; scene.objects.len()];
    for f in 0..scene.duration {
        for (b, points) in boxes.iter_mut().zip(frame_points(scene, &gt, f)?) {
            for p in points {
                let [u, v, _] = scene.camera.project_point(p.position)?;
                *b = [b[0].min(u - r), b[1].min(v - r), b[2].max(u + r), b[3].max(v + r)];
            }
        }
    }
    Ok(boxes)
}

pub fn scene_fits(scene: &SceneSpec) -> bool {
    let Ok(boxes) = swept_boxes(scene) else { return false };
    let (w, h) = (scene.camera.width as f64, scene.camera.height as f64);
    let inside = boxes.iter().all(|b| b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= w - 1.0 && b[3] <= h - 1.0);
    let apart = boxes.iter().enumerate().all(|(i, a)| {
        boxes[i + 1..].iter().all(|b| a[2] + 2.0 < b[0] || b[2] + 2.0 < a[0] || a[3] + 2.0 < b[1] || b[3] + 2.0 < a[1])
    });
    inside && apart
}

/// A random scene with `objects` objects in separate horizontal slots.
/// Category, action, modifiers and placement come from `seed`; draws are
/// repeated until every object stays in view and the objects' swept image
/// boxes do not touch (the first draw is kept if none qualifies).
pub fn random_scene(seed: u64, objects: usize, duration: usize) -> SceneSpec {
    let mut r = rng::seeded(seed);
    let first = draw_scene(&mut r, seed, objects, duration);
    if scene_fits(&first) {
        return first;
    }
    for _ in 0..200 {
        let s = draw_scene(&mut r, seed, objects, duration);
        if scene_fits(&s) {
            return s;
        }
    }
    first
}
