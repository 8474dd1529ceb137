//! Training perturbations for the motion prior.
//!
//! Three corruptions are applied to clean motion: closed-form forward
//! noising `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`, shuffling the
//! frames inside a segment, and dropping a short segment while tiling the
//! remainder back to the original length. Every perturbation is a pure
//! function of the input and a [`PerturbationRecord`], so corpora can be
//! replayed exactly.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motion::{MotionError, MotionSequence};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerturbError {
    #[error("noise step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("range [{lo}, {hi}) out of bounds for {len} frames")]
    RangeOutOfBounds { lo: usize, hi: usize, len: usize },
    #[error("dropped segment of {len} frames exceeds the cap of {max}")]
    SegmentTooLarge { len: usize, max: usize },
    #[error("invalid perturbation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

/// Variance schedule `gamma_t` and its cumulative product
/// `abar_t = prod_{i<=t} (1 - gamma_i)`. Steps are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    gamma: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_gamma(gamma: Vec<f64>) -> Result<Self, PerturbError> {
        if gamma.is_empty() {
            return Err(PerturbError::InvalidConfig("schedule needs at least one step".into()));
        }
        if let Some(g) = gamma.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
            return Err(PerturbError::InvalidConfig(format!("gamma {g} not in (0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(gamma.len());
        let mut acc = 1.0;
        for g in &gamma {
            acc *= 1.0 - g;
            alpha_bar.push(acc);
        }
        Ok(Self { gamma, alpha_bar })
    }

    /// Linearly spaced `gamma` from `start` to `end` over `steps` steps.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self, PerturbError> {
        if steps == 0 {
            return Err(PerturbError::InvalidConfig("schedule needs at least one step".into()));
        }
        let gamma = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_gamma(gamma)
    }

    pub fn steps(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, PerturbError> {
        if t == 0 || t > self.steps() {
            return Err(PerturbError::StepOutOfRange { t, steps: self.steps() });
        }
        Ok(self.alpha_bar[t - 1])
    }
}

/// Linear schedule parameters; the default is 1e-4 to 0.02 over 1000 steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub start: f64,
    pub end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 1000, start: 1e-4, end: 0.02 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule, PerturbError> {
        NoiseSchedule::linear(self.steps, self.start, self.end)
    }
}

fn noise_with_alpha_bar(seq: &MotionSequence, alpha_bar: f64, seed: u64) -> MotionSequence {
    let mut rng = rng::seeded(seed);
    let (keep, spread) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let frames = seq
        .frames
        .iter()
        .map(|row| {
            row.iter()
                .map(|&x| {
                    let eps: f64 = rng.sample(StandardNormal);
                    keep * x + spread * eps
                })
                .collect()
        })
        .collect();
    seq.with_frames(frames)
}

/// Closed-form forward noising at step `t`.
pub fn forward_noise(
    seq: &MotionSequence,
    t: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<MotionSequence, PerturbError> {
    let alpha_bar = sched.alpha_bar(t)?;
    seq.ensure_valid()?;
    Ok(noise_with_alpha_bar(seq, alpha_bar, seed))
}

fn check_range(seq: &MotionSequence, lo: usize, hi: usize) -> Result<(), PerturbError> {
    seq.ensure_valid()?;
    if lo >= hi || hi > seq.len() {
        return Err(PerturbError::RangeOutOfBounds { lo, hi, len: seq.len() });
    }
    Ok(())
}

/// Seeded Fisher-Yates permutation of frames `[lo, hi)`.
pub fn shuffle_segment(
    seq: &MotionSequence,
    lo: usize,
    hi: usize,
    seed: u64,
) -> Result<MotionSequence, PerturbError> {
    check_range(seq, lo, hi)?;
    let mut frames = seq.frames.clone();
    let segment = &mut frames[lo..hi];
    let mut rng = rng::seeded(seed);
    for i in (1..segment.len()).rev() {
        let j = rng.random_range(0..=i);
        segment.swap(i, j);
    }
    Ok(seq.with_frames(frames))
}

/// Largest segment [`drop_repeat`] may remove from `len` frames.
pub fn max_drop(len: usize) -> usize {
    len / 4
}

/// Removes frames `[lo, hi)` and tiles the retained frames, restarting from
/// their beginning, until the original length is reached.
///
/// `seed` is carried for record uniformity; the operation itself is not
/// random.
pub fn drop_repeat(
    seq: &MotionSequence,
    lo: usize,
    hi: usize,
    _seed: u64,
) -> Result<MotionSequence, PerturbError> {
    check_range(seq, lo, hi)?;
    let len = hi - lo;
    if len > max_drop(seq.len()) {
        return Err(PerturbError::SegmentTooLarge { len, max: max_drop(seq.len()) });
    }
    let retained: Vec<&Vec<f64>> = seq.frames[..lo].iter().chain(&seq.frames[hi..]).collect();
    let frames = retained.iter().cycle().take(seq.len()).map(|f| (*f).clone()).collect();
    Ok(seq.with_frames(frames))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Noise,
    Shuffle,
    DropRepeat,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 3] =
        [PerturbationKind::Noise, PerturbationKind::Shuffle, PerturbationKind::DropRepeat];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum Perturbation {
    /// `alpha_bar` is stored so replay does not need the schedule.
    Noise { t: usize, alpha_bar: f64 },
    Shuffle { lo: usize, hi: usize },
    DropRepeat { lo: usize, hi: usize },
}

impl Perturbation {
    pub fn kind(&self) -> PerturbationKind {
        match self {
            Perturbation::Noise { .. } => PerturbationKind::Noise,
            Perturbation::Shuffle { .. } => PerturbationKind::Shuffle,
            Perturbation::DropRepeat { .. } => PerturbationKind::DropRepeat,
        }
    }
}

/// A replayable perturbation: `{"kind", "params", "seed"}` on disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    #[serde(flatten)]
    pub perturbation: Perturbation,
    pub seed: u64,
}

impl PerturbationRecord {
    pub fn kind(&self) -> PerturbationKind {
        self.perturbation.kind()
    }

    pub fn apply(&self, seq: &MotionSequence) -> Result<MotionSequence, PerturbError> {
        match self.perturbation {
            Perturbation::Noise { alpha_bar, .. } => {
                seq.ensure_valid()?;
                Ok(noise_with_alpha_bar(seq, alpha_bar, self.seed))
            }
            Perturbation::Shuffle { lo, hi } => shuffle_segment(seq, lo, hi, self.seed),
            Perturbation::DropRepeat { lo, hi } => drop_repeat(seq, lo, hi, self.seed),
        }
    }
}

/// Segment length bounds: `min` frames up to `floor(max_fraction * F)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentRange {
    pub min: usize,
    pub max_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    /// Probabilities of noise, shuffle and drop-repeat. They sum to one
    /// unless `compose` is set, in which case each is an independent
    /// inclusion probability.
    pub probabilities: [f64; 3],
    pub schedule: ScheduleSpec,
    /// Inclusive range of noise steps drawn for training.
    pub noise_steps: (usize, usize),
    pub shuffle: SegmentRange,
    pub drop: SegmentRange,
    /// Apply every kind independently instead of exactly one per sample.
    #[serde(default)]
    pub compose: bool,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            probabilities: [1.0 / 3.0; 3],
            schedule: ScheduleSpec::default(),
            noise_steps: (1, 100),
            shuffle: SegmentRange { min: 2, max_fraction: 0.25 },
            drop: SegmentRange { min: 1, max_fraction: 0.25 },
            compose: false,
        }
    }
}

impl PerturbConfig {
    /// Config that always draws `kind`.
    pub fn only(kind: PerturbationKind) -> Self {
        let mut probabilities = [0.0; 3];
        probabilities[kind as usize] = 1.0;
        Self { probabilities, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PerturbError> {
        let bad = |m: String| Err(PerturbError::InvalidConfig(m));
        if self.probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad(format!("probabilities {:?} must lie in [0, 1]", self.probabilities));
        }
        let sum: f64 = self.probabilities.iter().sum();
        if !self.compose && (sum - 1.0).abs() > 1e-9 {
            return bad(format!("probabilities sum to {sum}, expected 1"));
        }
        let (a, b) = self.noise_steps;
        if a == 0 || a > b || b > self.schedule.steps {
            return bad(format!("noise steps {a}..={b} outside the schedule"));
        }
        for (name, r) in [("shuffle", self.shuffle), ("drop", self.drop)] {
            if r.min == 0 || !(0.0..=1.0).contains(&r.max_fraction) {
                return bad(format!("{name} segment range {r:?} is invalid"));
            }
        }
        Ok(())
    }

    fn draw(
        &self,
        kind: PerturbationKind,
        len: usize,
        sched: &NoiseSchedule,
        rng: &mut rng::Rng,
    ) -> Result<Perturbation, PerturbError> {
        let segment = |r: SegmentRange, cap: usize, rng: &mut rng::Rng| -> Option<(usize, usize)> {
            let max = ((r.max_fraction * len as f64).floor() as usize).min(cap).max(r.min);
            if max > cap || r.min > len {
                return None;
            }
            let seg = rng.random_range(r.min..=max);
            let lo = rng.random_range(0..=len - seg);
            Some((lo, lo + seg))
        };
        Ok(match kind {
            PerturbationKind::Noise => {
                let t = rng.random_range(self.noise_steps.0..=self.noise_steps.1);
                Perturbation::Noise { t, alpha_bar: sched.alpha_bar(t)? }
            }
            PerturbationKind::Shuffle => {
                let (lo, hi) = segment(self.shuffle, len, rng)
                    .ok_or(PerturbError::RangeOutOfBounds { lo: 0, hi: self.shuffle.min, len })?;
                Perturbation::Shuffle { lo, hi }
            }
            PerturbationKind::DropRepeat => {
                let (lo, hi) = segment(self.drop, max_drop(len), rng).ok_or(
                    PerturbError::SegmentTooLarge { len: self.drop.min, max: max_drop(len) },
                )?;
                Perturbation::DropRepeat { lo, hi }
            }
        })
    }
}

/// Draws one perturbation kind and its parameters from the seeded stream,
/// applies it, and returns the result with a replayable record.
pub fn sample_perturbation(
    seq: &MotionSequence,
    config: &PerturbConfig,
    seed: u64,
) -> Result<(MotionSequence, PerturbationRecord), PerturbError> {
    config.validate()?;
    seq.ensure_valid()?;
    let sched = config.schedule.build()?;
    let mut rng = rng::seeded(seed);
    let u: f64 = rng.random();
    let mut kind = PerturbationKind::DropRepeat;
    let mut acc = 0.0;
    for k in PerturbationKind::ALL {
        acc += config.probabilities[k as usize];
        if u < acc {
            kind = k;
            break;
        }
    }
    let perturbation = config.draw(kind, seq.len(), &sched, &mut rng)?;
    let record = PerturbationRecord { perturbation, seed: rng.next_u64() };
    Ok((record.apply(seq)?, record))
}

/// Applies perturbations according to `config.compose`: exactly one drawn
/// kind when off, otherwise each kind independently with its probability,
/// in the order noise, shuffle, drop-repeat.
pub fn perturb(
    seq: &MotionSequence,
    config: &PerturbConfig,
    seed: u64,
) -> Result<(MotionSequence, Vec<PerturbationRecord>), PerturbError> {
    if !config.compose {
        let (out, record) = sample_perturbation(seq, config, seed)?;
        return Ok((out, vec![record]));
    }
    config.validate()?;
    seq.ensure_valid()?;
    let sched = config.schedule.build()?;
    let mut rng = rng::seeded(seed);
    let mut out = seq.clone();
    let mut records = Vec::new();
    for kind in [PerturbationKind::Noise, PerturbationKind::Shuffle, PerturbationKind::DropRepeat] {
        let u: f64 = rng.random();
        if u >= config.probabilities[kind as usize] {
            continue;
        }
        // Segments that do not fit short sequences are skipped, not errors.
        let Ok(perturbation) = config.draw(kind, seq.len(), &sched, &mut rng) else { continue };
        let record = PerturbationRecord { perturbation, seed: rng.next_u64() };
        out = record.apply(&out)?;
        records.push(record);
    }
    Ok((out, records))
}

/// Replays a list of records in order.
pub fn replay(seq: &MotionSequence, records: &[PerturbationRecord]) -> Result<MotionSequence, PerturbError> {
    records.iter().try_fold(seq.clone(), |acc, r| r.apply(&acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{Category, ParametricModelSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn seq_of(frames: Vec<Vec<f64>>) -> MotionSequence {
        // Operations here only look at the frame matrix, so a custom-width
        // generic model is enough.
        let mut spec = (*ParametricModelSpec::preset(Category::GenericObject)).clone();
        spec.pose_dim = frames[0].len();
        MotionSequence::new(std::sync::Arc::new(spec), 8.0, frames)
    }

    fn ramp(n: usize) -> MotionSequence {
        seq_of((0..n).map(|i| vec![i as f64, -(i as f64)]).collect())
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.steps(), 1000);
        for t in 2..=1000 {
            let (prev, cur) = (s.alpha_bar(t - 1).unwrap(), s.alpha_bar(t).unwrap());
            assert!(cur < prev && cur > 0.0);
            assert!((cur - prev * (1.0 - s.gamma()[t - 1])).abs() < 1e-15);
        }
        assert!(matches!(s.alpha_bar(0), Err(PerturbError::StepOutOfRange { .. })));
        assert!(matches!(s.alpha_bar(1001), Err(PerturbError::StepOutOfRange { .. })));
        assert!(NoiseSchedule::from_gamma(vec![0.0]).is_err());
    }

    #[test]
    fn noise_identity_limit_and_determinism() {
        let sched = NoiseSchedule::from_gamma(vec![1e-12]).unwrap();
        let input = ramp(10);
        let out = forward_noise(&input, 1, &sched, 9).unwrap();
        for (a, b) in out.frames.iter().flatten().zip(input.frames.iter().flatten()) {
            assert!((a - b).abs() < 1e-5);
        }
        let def = ScheduleSpec::default().build().unwrap();
        let a = forward_noise(&input, 10, &def, 77).unwrap();
        let b = forward_noise(&input, 10, &def, 77).unwrap();
        assert_eq!(a.frames, b.frames);
        assert!(forward_noise(&input, 0, &def, 1).is_err());
    }

    #[test]
    fn noise_variance_on_zero_sequence() {
        let sched = ScheduleSpec::default().build().unwrap();
        let zero = seq_of(vec![vec![0.0; 100]; 1000]);
        for t in [10, 250] {
            let out = forward_noise(&zero, t, &sched, 3).unwrap();
            let vals: Vec<f64> = out.frames.into_iter().flatten().collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            let expected = 1.0 - sched.alpha_bar(t).unwrap();
            assert!((var - expected).abs() / expected < 0.02, "t={t} var={var} expected={expected}");
        }
    }

    #[test]
    fn shuffle_cases() {
        let input = ramp(16);
        assert_eq!(shuffle_segment(&input, 3, 4, 1).unwrap().frames, input.frames);
        let full = shuffle_segment(&input, 0, 16, 7).unwrap();
        assert_ne!(full.frames, input.frames);
        let mut sorted = full.frames.clone();
        sorted.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(sorted, input.frames);
        assert!(matches!(shuffle_segment(&input, 4, 4, 1), Err(PerturbError::RangeOutOfBounds { .. })));
        assert!(matches!(shuffle_segment(&input, 0, 17, 1), Err(PerturbError::RangeOutOfBounds { .. })));
    }

    #[test]
    fn shuffle_replays_fisher_yates() {
        // Replays the permutation from the same stream independently.
        let input = ramp(16);
        let out = shuffle_segment(&input, 0, 16, 7).unwrap();
        let mut idx: Vec<usize> = (0..16).collect();
        let mut rng = rng::seeded(7);
        for i in (1..16).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let expected: Vec<Vec<f64>> = idx.iter().map(|&i| input.frames[i].clone()).collect();
        assert_eq!(out.frames, expected);
    }

    #[test]
    fn drop_repeat_cases() {
        let input = ramp(8);
        let out = drop_repeat(&input, 0, 1, 0).unwrap();
        let mut expected: Vec<Vec<f64>> = input.frames[1..8].to_vec();
        expected.push(input.frames[1].clone());
        assert_eq!(out.frames, expected);

        let input = ramp(16);
        let out = drop_repeat(&input, 4, 8, 0).unwrap();
        let mut cat: Vec<Vec<f64>> = input.frames[0..4].to_vec();
        cat.extend_from_slice(&input.frames[8..16]);
        let tiled: Vec<Vec<f64>> = cat.iter().chain(cat.iter()).take(16).cloned().collect();
        assert_eq!(out.frames, tiled);

        assert!(matches!(drop_repeat(&input, 0, 5, 0), Err(PerturbError::SegmentTooLarge { .. })));
    }

    #[test]
    fn degenerate_distribution_always_noise() {
        let cfg = PerturbConfig::only(PerturbationKind::Noise);
        for seed in 0..50 {
            let (_, rec) = sample_perturbation(&ramp(16), &cfg, seed).unwrap();
            assert_eq!(rec.kind(), PerturbationKind::Noise);
        }
    }

    #[test]
    fn uniform_kind_frequencies() {
        let cfg = PerturbConfig::default();
        let input = ramp(16);
        let mut counts = [0usize; 3];
        for seed in 0..10_000u64 {
            let (_, rec) = sample_perturbation(&input, &cfg, seed).unwrap();
            counts[rec.kind() as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((0.30..=0.37).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn record_json_shape_and_replay() {
        let input = ramp(16);
        let (out, rec) = sample_perturbation(&input, &PerturbConfig::default(), 5).unwrap();
        assert_eq!(rec.apply(&input).unwrap().frames, out.frames);
        let json = serde_json::to_value(rec).unwrap();
        assert!(json.get("kind").is_some() && json.get("params").is_some() && json.get("seed").is_some());
        let back: PerturbationRecord = serde_json::from_value(json).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = PerturbConfig::default();
        cfg.probabilities = [0.5, 0.5, 0.5];
        assert!(matches!(sample_perturbation(&ramp(16), &cfg, 0), Err(PerturbError::InvalidConfig(_))));
        cfg.compose = true;
        assert!(perturb(&ramp(16), &cfg, 0).is_ok());
        let mut cfg = PerturbConfig::default();
        cfg.noise_steps = (0, 10);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn composed_perturbations_replay() {
        let cfg = PerturbConfig { probabilities: [1.0, 1.0, 1.0], compose: true, ..PerturbConfig::default() };
        let input = ramp(32);
        let (out, records) = perturb(&input, &cfg, 12).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(replay(&input, &records).unwrap().frames, out.frames);
    }

    proptest! {
        #[test]
        fn perturbations_preserve_shape_and_replay(seed in any::<u64>(), n in 4usize..40) {
            let input = ramp(n);
            let (out, rec) = sample_perturbation(&input, &PerturbConfig::default(), seed).unwrap();
            prop_assert_eq!(out.len(), n);
            prop_assert!(out.frames.iter().all(|r| r.len() == 2));
            prop_assert_eq!(rec.apply(&input).unwrap().frames, out.frames);
        }

        #[test]
        fn shuffle_preserves_multiset(seed in any::<u64>(), lo in 0usize..20, len in 1usize..12) {
            let input = ramp(32);
            let out = shuffle_segment(&input, lo, lo + len, seed).unwrap();
            let mut a = out.frames.clone();
            a.sort_by(|x, y| x[0].partial_cmp(&y[0]).unwrap());
            prop_assert_eq!(a, input.frames.clone());
            prop_assert_eq!(&out.frames[..lo], &input.frames[..lo]);
            prop_assert_eq!(&out.frames[lo + len..], &input.frames[lo + len..]);
        }

        #[test]
        fn drop_repeat_only_retained_frames(lo in 0usize..28, len in 1usize..=8) {
            let input = ramp(32);
            prop_assume!(lo + len <= 32);
            let out = drop_repeat(&input, lo, lo + len, 0).unwrap();
            prop_assert_eq!(out.len(), 32);
            for f in &out.frames {
                let i = f[0] as usize;
                prop_assert!(i < lo || i >= lo + len);
            }
        }
    }
}
