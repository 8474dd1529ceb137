//! Long motions and long clips: extend a short motion by interpolation,
//! extrapolation and prior refinement, generate it window by window, and
//! stitch the overlapping windows with a linear ramp.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;
use crate::motion::{extrapolate, motion_strength, resample, MotionError, MotionSequence};
use crate::pipeline::{motion_channels, PipelineError, RevisionConfig};
use crate::pmp::{Conditioning, PmpError, PmpModel};
use crate::rng;
use crate::simgen::{SceneSpec, SimError, VideoClip, VideoGenerator};

#[derive(Debug, Error)]
pub enum LongVideoError {
    #[error("sequence too short: {found} frames, need at least {needed}")]
    SequenceTooShort { found: usize, needed: usize },
    #[error("total length {total} is shorter than one window of {window}")]
    TotalTooShort { total: usize, window: usize },
    #[error("invalid window plan: {0}")]
    InvalidPlan(String),
    #[error("clips do not match the plan: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Pmp(#[from] PmpError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pipeline(#[from] Box<PipelineError>),
}

impl From<PipelineError> for LongVideoError {
    fn from(e: PipelineError) -> Self {
        Self::Pipeline(Box::new(e))
    }
}

pub const DEFAULT_WINDOW: usize = 32;
pub const DEFAULT_STRIDE: usize = 24;

/// Sliding windows over `[0, total + padding)`. `padding` frames were added
/// so the last window ends on the padded total; stitched output is cut back
/// to `total`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window: usize,
    pub stride: usize,
    pub total: usize,
    #[serde(default)]
    pub padding: usize,
    pub windows: Vec<(usize, usize)>,
}

impl WindowPlan {
    pub fn overlap(&self) -> usize {
        self.window - self.stride
    }

    pub fn padded_total(&self) -> usize {
        self.total + self.padding
    }
}

pub fn plan_windows(total_len: usize, window: usize, stride: usize) -> Result<WindowPlan, LongVideoError> {
    if window == 0 || stride == 0 || stride > window {
        return Err(LongVideoError::InvalidPlan(format!("window {window}, stride {stride}")));
    }
    if total_len < window {
        return Err(LongVideoError::TotalTooShort { total: total_len, window });
    }
    let steps = (total_len - window).div_ceil(stride);
    let padded = window + steps * stride;
    let windows = (0..=steps).map(|k| (k * stride, k * stride + window)).collect();
    Ok(WindowPlan { window, stride, total: total_len, padding: padded - total_len, windows })
}

/// Ramp weights `j / (len + 1)` for `j = 1..=len`, given to the later window.
pub fn blend_weights(len: usize) -> Vec<f64> {
    (1..=len).map(|j| j as f64 / (len + 1) as f64).collect()
}

/// Blends per-window rows into one sequence of `total` rows. Windows must be
/// sorted, start at 0, leave no gaps and overlap only their neighbours; in
/// each overlap the later window's weight ramps up linearly.
fn blend_rows(total: usize, windows: &[(usize, usize)], rows: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(total);
    for (k, &(start, end)) in windows.iter().enumerate() {
        let from = out.len();
        let overlap = from.saturating_sub(start);
        let weights = blend_weights(overlap);
        for (j, w) in weights.iter().enumerate() {
            let row = &mut out[start + j];
            for (v, &b) in row.iter_mut().zip(&rows[k][j]) {
                *v = (1.0 - w) * *v + w * b;
            }
        }
        for t in from.max(start)..end.min(total) {
            out.push(rows[k][t - start].clone());
        }
    }
    out
}

/// Windows of `window` frames at `stride` covering `[0, total)`, the last
/// one aligned to the end.
fn covering_windows(total: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    if total <= window {
        return vec![(0, total)];
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + window < total {
        out.push((start, start + window));
        start += stride;
    }
    out.push((total - window, total));
    out
}

/// Runs the prior over a sequence of any length. Sequences longer than the
/// model's `max_frames` are refined in overlapping windows (three-quarter
/// stride) and blended with the stitching ramp.
pub fn refine_long(pmp: &PmpModel, seq: &MotionSequence, cond: &Conditioning) -> Result<MotionSequence, LongVideoError> {
    let max = pmp.config.max_frames;
    if seq.len() <= max {
        return Ok(pmp.refine(seq, cond)?);
    }
    let windows = covering_windows(seq.len(), max, (3 * max / 4).max(1));
    let rows = windows
        .iter()
        .map(|&(a, b)| Ok(pmp.refine(&seq.with_frames(seq.frames[a..b].to_vec()), cond)?.frames))
        .collect::<Result<Vec<_>, LongVideoError>>()?;
    Ok(seq.with_frames(blend_rows(seq.len(), &windows, &rows)))
}

/// Lengthens `seq` to `target_len`: resample to `min(2F, target_len)`,
/// extrapolate the rest, then refine with the prior.
pub fn extend_motion(
    seq: &MotionSequence,
    target_len: usize,
    pmp: &PmpModel,
    cond: &Conditioning,
) -> Result<MotionSequence, LongVideoError> {
    if seq.len() < 2 {
        return Err(LongVideoError::SequenceTooShort { found: seq.len(), needed: 2 });
    }
    if target_len < seq.len() {
        return Err(LongVideoError::SequenceTooShort { found: target_len, needed: seq.len() });
    }
    let mid = (2 * seq.len()).min(target_len);
    let mut out = if mid == seq.len() { seq.clone() } else { resample(seq, mid)? };
    // Resampling to twice the frames over the same span doubles the rate.
    out.fps = seq.fps * (mid as f64 - 1.0).max(1.0) / (seq.len() as f64 - 1.0);
    if mid < target_len {
        out = extrapolate(&out, target_len - mid)?;
    }
    refine_long(pmp, &out, cond)
}

/// Frames `[start, end)` of each window.
pub fn slice_windows(seq: &MotionSequence, plan: &WindowPlan) -> Result<Vec<MotionSequence>, LongVideoError> {
    if seq.len() != plan.padded_total() {
        return Err(LongVideoError::PlanMismatch(format!(
            "motion has {} frames, plan covers {}",
            seq.len(),
            plan.padded_total()
        )));
    }
    Ok(plan.windows.iter().map(|&(a, b)| seq.with_frames(seq.frames[a..b].to_vec())).collect())
}

fn check_plan(plan: &WindowPlan, count: usize) -> Result<(), LongVideoError> {
    if count != plan.windows.len() {
        return Err(LongVideoError::PlanMismatch(format!("{count} clips for {} windows", plan.windows.len())));
    }
    let expected = plan_windows(plan.padded_total(), plan.window, plan.stride)?;
    if expected.windows != plan.windows {
        return Err(LongVideoError::PlanMismatch("windows are not a regular sliding plan".into()));
    }
    Ok(())
}

/// Stitches per-window clips: overlap frames blend with [`blend_weights`],
/// rounding half to even; other frames are copied. Output has `plan.total`
/// frames.
pub fn stitch(clips: &[VideoClip], plan: &WindowPlan) -> Result<VideoClip, LongVideoError> {
    check_plan(plan, clips.len())?;
    let first = &clips[0];
    for (k, c) in clips.iter().enumerate() {
        if c.len() != plan.window {
            return Err(LongVideoError::PlanMismatch(format!("clip {k} has {} frames, window is {}", c.len(), plan.window)));
        }
        if (c.width, c.height) != (first.width, first.height) {
            return Err(LongVideoError::PlanMismatch(format!(
                "clip {k} is {}x{}, clip 0 is {}x{}",
                c.width, c.height, first.width, first.height
            )));
        }
    }
    let rows: Vec<Vec<Vec<f64>>> = clips
        .iter()
        .map(|c| c.frames.iter().map(|f| f.data.iter().map(|&v| v as f64).collect()).collect())
        .collect();
    let frames = blend_rows(plan.padded_total(), &plan.windows, &rows)
        .into_iter()
        .take(plan.total)
        .map(|row| {
            let data = row.into_iter().map(|v| v.round_ties_even().clamp(0.0, 255.0) as u8).collect();
            Grid { width: first.width, height: first.height, data }
        })
        .collect();
    Ok(VideoClip { frames, fps: first.fps, width: first.width, height: first.height })
}

/// The stitching blend applied in parameter space.
pub fn stitch_motion(motions: &[MotionSequence], plan: &WindowPlan) -> Result<MotionSequence, LongVideoError> {
    check_plan(plan, motions.len())?;
    for (k, m) in motions.iter().enumerate() {
        if m.len() != plan.window || m.pose_dim() != motions[0].pose_dim() {
            return Err(LongVideoError::PlanMismatch(format!("motion {k} does not fit the window")));
        }
    }
    let rows: Vec<Vec<Vec<f64>>> = motions.iter().map(|m| m.frames.clone()).collect();
    let mut frames = blend_rows(plan.padded_total(), &plan.windows, &rows);
    frames.truncate(plan.total);
    Ok(motions[0].with_frames(frames))
}

/// Largest per-transition strength touching an overlap region, and the
/// largest inside any single window, for a stitched motion.
pub fn seam_strengths(
    stitched: &MotionSequence,
    windows: &[MotionSequence],
    plan: &WindowPlan,
) -> Result<(f64, f64), LongVideoError> {
    let s = motion_strength(stitched)?.per_transition;
    let mut seam: f64 = 0.0;
    for w in plan.windows.windows(2) {
        let (lo, hi) = (w[1].0, w[0].1.min(plan.total));
        // Transitions into, within and out of the overlap.
        for t in lo.saturating_sub(1)..hi.min(s.len()) {
            seam = seam.max(s[t]);
        }
    }
    let mut inside: f64 = 0.0;
    for m in windows {
        inside = inside.max(motion_strength(m)?.per_transition.iter().cloned().fold(0.0, f64::max));
    }
    Ok((seam, inside))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongRun {
    pub plan: WindowPlan,
    /// One extended motion per object, padded to the plan.
    pub extended: Vec<MotionSequence>,
    /// Per window, the motions the generator realized.
    pub realized: Vec<Vec<MotionSequence>>,
    pub clips: Vec<VideoClip>,
    pub clip: VideoClip,
    /// Per object, realized window motions stitched like the pixels.
    pub stitched: Vec<MotionSequence>,
}

/// Generates a long clip from per-object motions of the plan's padded
/// length. Each window gets a copy of `scene` whose objects follow their
/// slice of the motion, conditioned with full-motion channels at the fine
/// resolution; window `k` uses seed `derive(seed, k)`.
pub fn generate_long(
    generator: &dyn VideoGenerator,
    scene: &SceneSpec,
    motions: &[MotionSequence],
    plan: &WindowPlan,
    config: &RevisionConfig,
    seed: u64,
) -> Result<LongRun, LongVideoError> {
    if motions.len() != scene.objects.len() {
        return Err(LongVideoError::PlanMismatch(format!("{} motions for {} objects", motions.len(), scene.objects.len())));
    }
    if config.fine.frame_count(plan.window) != plan.window {
        return Err(LongVideoError::InvalidPlan("long generation needs a fine config with frame_fraction 1".into()));
    }
    let slices = motions.iter().map(|m| slice_windows(m, plan)).collect::<Result<Vec<_>, _>>()?;
    let mut realized = Vec::with_capacity(plan.windows.len());
    let mut clips = Vec::with_capacity(plan.windows.len());
    for k in 0..plan.windows.len() {
        let window_motions: Vec<MotionSequence> = slices.iter().map(|s| s[k].clone()).collect();
        let mut window_scene = scene.clone();
        window_scene.duration = plan.window;
        for (obj, m) in window_scene.objects.iter_mut().zip(&window_motions) {
            obj.scripted = Some(m.frames.clone());
        }
        let channels = motion_channels(&window_scene, &window_motions, config)?;
        let (clip, real) = generator.generate(&window_scene, &channels, &config.fine, rng::derive(seed, k as u64))?;
        clips.push(clip);
        realized.push(real);
    }
    let clip = stitch(&clips, plan)?;
    let stitched = (0..motions.len())
        .map(|i| {
            let per: Vec<MotionSequence> = realized.iter().map(|r| r[i].clone()).collect();
            stitch_motion(&per, plan)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LongRun { plan: plan.clone(), extended: motions.to_vec(), realized, clips, clip, stitched })
}

/// Extends every object's motion to `target_len` (padded up to the plan)
/// and generates the long clip.
pub fn run_long(
    generator: &dyn VideoGenerator,
    pmp: &PmpModel,
    scene: &SceneSpec,
    motions: &[MotionSequence],
    target_len: usize,
    config: &RevisionConfig,
    seed: u64,
) -> Result<LongRun, LongVideoError> {
    let plan = plan_windows(target_len, DEFAULT_WINDOW, DEFAULT_STRIDE)?;
    let extended = motions
        .iter()
        .zip(&scene.objects)
        .map(|(m, obj)| {
            let cond = Conditioning {
                tokens: pmp.config.encode_tokens(&obj.conditioning_tags())?,
                strength: motion_strength(m)?.mean,
                category: obj.category,
            };
            extend_motion(m, plan.padded_total(), pmp, &cond)
        })
        .collect::<Result<Vec<_>, LongVideoError>>()?;
    generate_long(generator, scene, &extended, &plan, config, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{Category, ParametricModelSpec};
    use crate::pipeline::walker_scene;
    use crate::pmp::PmpConfig;
    use crate::simgen::{scene_gt, SyntheticGenerator};
    use proptest::prelude::*;

    fn flat_clip(value: u8, frames: usize) -> VideoClip {
        VideoClip { frames: vec![Grid::filled(4, 3, value); frames], fps: 8.0, width: 4, height: 3 }
    }

    fn tiny_pmp() -> PmpModel {
        let cfg = PmpConfig { layers: 1, model_dim: 8, heads: 2, ffn_dim: 8, max_frames: 32, ..PmpConfig::default() };
        let mut m = PmpModel::init(cfg, 1).unwrap();
        m.params.w_out.fill(0.0);
        m
    }

    fn cond() -> Conditioning {
        Conditioning { tokens: vec![], strength: 0.1, category: Category::Human }
    }

    #[test]
    fn plan_for_128_frames() {
        let plan = plan_windows(128, 32, 24).unwrap();
        assert_eq!(plan.windows, vec![(0, 32), (24, 56), (48, 80), (72, 104), (96, 128)]);
        assert_eq!(plan.overlap(), 8);
        assert_eq!(plan.padding, 0);
        assert_eq!(plan_windows(32, 32, 24).unwrap().windows, vec![(0, 32)]);
        assert!(matches!(plan_windows(31, 32, 24), Err(LongVideoError::TotalTooShort { .. })));
        assert!(plan_windows(64, 32, 40).is_err());
    }

    #[test]
    fn uneven_total_is_padded() {
        let plan = plan_windows(100, 32, 24).unwrap();
        assert_eq!(plan.padded_total(), 104);
        assert_eq!(plan.windows.last(), Some(&(72, 104)));
        let clips: Vec<_> = plan.windows.iter().map(|_| flat_clip(7, 32)).collect();
        assert_eq!(stitch(&clips, &plan).unwrap().len(), 100);
    }

    proptest! {
        #[test]
        fn consecutive_windows_overlap_by_window_minus_stride(window in 1usize..40, stride_frac in 0.05f64..1.0, extra in 0usize..200) {
            let stride = ((window as f64 * stride_frac).ceil() as usize).clamp(1, window);
            let plan = plan_windows(window + extra, window, stride).unwrap();
            prop_assert_eq!(plan.windows[0].0, 0);
            prop_assert_eq!(plan.windows.last().unwrap().1, plan.padded_total());
            prop_assert!(plan.padding < stride);
            for w in plan.windows.windows(2) {
                prop_assert_eq!(w[0].1 - w[1].0, window - stride);
            }
        }

        #[test]
        fn blend_weights_partition_unity(len in 0usize..64) {
            for w in blend_weights(len) {
                prop_assert!(w > 0.0 && w < 1.0);
                prop_assert_eq!((1.0 - w) + w, 1.0);
            }
        }
    }

    #[test]
    fn weights_for_overlap_eight() {
        let w = blend_weights(8);
        for (j, v) in w.iter().enumerate() {
            assert_eq!(*v, (j + 1) as f64 / 9.0);
        }
    }

    #[test]
    fn ramp_between_constant_clips() {
        let plan = plan_windows(56, 32, 24).unwrap();
        let out = stitch(&[flat_clip(0, 32), flat_clip(90, 32)], &plan).unwrap();
        assert_eq!(out.len(), 56);
        for t in 0..24 {
            assert!(out.frames[t].data.iter().all(|&v| v == 0));
        }
        for j in 1..=8 {
            let expected = (90.0 * j as f64 / 9.0).round_ties_even() as u8;
            assert_eq!(expected, 10 * j as u8);
            assert!(out.frames[23 + j].data.iter().all(|&v| v == expected), "frame {}", 23 + j);
        }
        for t in 32..56 {
            assert!(out.frames[t].data.iter().all(|&v| v == 90));
        }
    }

    #[test]
    fn stitching_identical_clips_is_lossless() {
        let mut r = rng::seeded(3);
        use rand::Rng;
        let base: Vec<Grid<u8>> = (0..128)
            .map(|_| Grid { width: 5, height: 4, data: (0..20).map(|_| r.random()).collect() })
            .collect();
        let plan = plan_windows(128, 32, 24).unwrap();
        let clips: Vec<VideoClip> = plan
            .windows
            .iter()
            .map(|&(a, b)| VideoClip { frames: base[a..b].to_vec(), fps: 8.0, width: 5, height: 4 })
            .collect();
        assert_eq!(stitch(&clips, &plan).unwrap().frames, base);
    }

    #[test]
    fn stitch_rejects_mismatches() {
        let plan = plan_windows(56, 32, 24).unwrap();
        assert!(matches!(stitch(&[flat_clip(0, 32)], &plan), Err(LongVideoError::PlanMismatch(_))));
        assert!(matches!(stitch(&[flat_clip(0, 32), flat_clip(0, 31)], &plan), Err(LongVideoError::PlanMismatch(_))));
        let mut small = flat_clip(0, 32);
        small.width = 2;
        small.frames = vec![Grid::filled(2, 3, 0); 32];
        assert!(matches!(stitch(&[flat_clip(0, 32), small], &plan), Err(LongVideoError::PlanMismatch(_))));
        let mut odd = plan.clone();
        odd.windows[1] = (20, 52);
        assert!(matches!(stitch(&[flat_clip(0, 32), flat_clip(0, 32)], &odd), Err(LongVideoError::PlanMismatch(_))));
    }

    #[test]
    fn extend_lengths() {
        let pmp = tiny_pmp();
        let gt = scene_gt(&walker_scene()).unwrap().remove(0);
        let out = extend_motion(&gt, 128, &pmp, &cond()).unwrap();
        assert_eq!(out.len(), 128);
        // With a zeroed output head the prior is the identity, so the first
        // 64 frames are the resampled input.
        let mid = resample(&gt, 64).unwrap();
        for (a, b) in out.frames[..64].iter().zip(&mid.frames) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
        let same = extend_motion(&gt, 32, &pmp, &cond()).unwrap();
        assert_eq!(same.frames, gt.frames);
        let short = MotionSequence::constant(ParametricModelSpec::preset(Category::Human), 8.0, &[0.0; 66], 1);
        assert!(matches!(extend_motion(&short, 8, &pmp, &cond()), Err(LongVideoError::SequenceTooShort { .. })));
        assert!(extend_motion(&gt, 16, &pmp, &cond()).is_err());
    }

    #[test]
    fn windowed_refinement_blends_identity() {
        let pmp = tiny_pmp();
        let gt = scene_gt(&walker_scene()).unwrap().remove(0);
        let long = resample(&gt, 100).unwrap();
        let out = refine_long(&pmp, &long, &cond()).unwrap();
        for (a, b) in out.frames.iter().flatten().zip(long.frames.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(covering_windows(100, 32, 24), vec![(0, 32), (24, 56), (48, 80), (68, 100)]);
    }

    #[test]
    fn stitched_motion_of_consistent_slices_is_the_motion() {
        let gt = scene_gt(&walker_scene()).unwrap().remove(0);
        let long = resample(&gt, 128).unwrap();
        let plan = plan_windows(128, 32, 24).unwrap();
        let windows = slice_windows(&long, &plan).unwrap();
        let stitched = stitch_motion(&windows, &plan).unwrap();
        for (a, b) in stitched.frames.iter().flatten().zip(long.frames.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        let (seam, inside) = seam_strengths(&stitched, &windows, &plan).unwrap();
        assert!(seam <= inside + 1e-12);
    }

    #[test]
    fn long_generation_is_128_frames_and_deterministic() {
        let pmp = tiny_pmp();
        let scene = walker_scene();
        let config = RevisionConfig::default();
        let gt = scene_gt(&scene).unwrap();
        let a = run_long(&SyntheticGenerator, &pmp, &scene, &gt, 128, &config, 5).unwrap();
        assert_eq!(a.clip.len(), 128);
        assert_eq!(a.clips.len(), 5);
        assert_eq!(a.stitched[0].len(), 128);
        let b = run_long(&SyntheticGenerator, &pmp, &scene, &gt, 128, &config, 5).unwrap();
        assert_eq!(a.clip.frames, b.clip.frames);
    }
}
