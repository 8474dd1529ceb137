use std::path::Path;

use serde::{Deserialize, Serialize};

use super::camera::CameraSpec;
use super::raster::{polygon_target_mask, render_part_masks};
use super::GeometryError;
use crate::grid::Grid;
use crate::io::{read_json, read_pgm8, write_json, write_pgm8, IoError};
use crate::motion::LabeledPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    FullMotion,
    TargetPose,
    Empty,
}

impl ConditionMode {
    /// Position of this mode's value in a confidence triple.
    pub fn slot(self) -> usize {
        match self {
            ConditionMode::FullMotion => 0,
            ConditionMode::TargetPose => 1,
            ConditionMode::Empty => 2,
        }
    }
}

/// Confidence values for full motion, target pose and empty conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfidenceTriple(pub [f64; 3]);

impl Default for ConfidenceTriple {
    fn default() -> Self {
        Self([1.0, 0.5, 0.0])
    }
}

impl ConfidenceTriple {
    pub fn full(&self) -> f64 {
        self.0[0]
    }

    pub fn target(&self) -> f64 {
        self.0[1]
    }

    pub fn empty(&self) -> f64 {
        self.0[2]
    }

    pub fn validate(&self) -> Result<(), String> {
        let [a, b, c] = self.0;
        if !(a.is_finite() && b.is_finite() && c.is_finite()) {
            return Err(format!("confidence triple {:?} is not finite", self.0));
        }
        if !(a >= b && b >= c) {
            return Err(format!("confidence triple {:?} must be ordered full >= target >= empty", self.0));
        }
        Ok(())
    }

    /// Where `c` sits between the empty and full values: 0 for empty, 1 for
    /// full. A degenerate triple maps everything to 0.
    pub fn normalized(&self, c: f64) -> f64 {
        let span = self.full() - self.empty();
        if span > 0.0 {
            ((c - self.empty()) / span).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

/// One target part: a label and the 2D pixel points whose hull it covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPart {
    pub label: u8,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConditionPayload {
    /// Per frame, per object labeled 3D points.
    FullMotion { frames: Vec<Vec<Vec<LabeledPoint>>>, camera: CameraSpec, splat_radius: f64 },
    /// Final-frame part points; earlier frames stay empty.
    TargetPose { frames: usize, parts: Vec<TargetPart>, width: usize, height: usize },
    Empty { frames: usize, width: usize, height: usize },
}

/// Per-frame part-label masks and confidence maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionChannels {
    pub mode: ConditionMode,
    pub triple: ConfidenceTriple,
    pub part_masks: Vec<Grid<u8>>,
    pub confidence: Vec<Grid<f64>>,
}

impl ConditionChannels {
    pub fn frames(&self) -> usize {
        self.part_masks.len()
    }

    pub fn labeled_pixels(&self) -> usize {
        self.part_masks.iter().map(|m| m.data.iter().filter(|&&l| l != 0).count()).sum()
    }

    /// Mean confidence over labeled pixels of all frames, or the empty value
    /// when nothing is labeled.
    pub fn labeled_confidence(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (m, c) in self.part_masks.iter().zip(&self.confidence) {
            for (&l, &v) in m.data.iter().zip(&c.data) {
                if l != 0 {
                    sum += v;
                    n += 1;
                }
            }
        }
        if n == 0 {
            self.triple.empty()
        } else {
            sum / n as f64
        }
    }

    /// Stored byte for a confidence value: 2, 1, 0 for full, target, empty.
    fn encode(&self, v: f64) -> u8 {
        match self.triple.0.iter().position(|&t| t == v) {
            Some(i) => 2 - i as u8,
            None => 0,
        }
    }
}

fn channels_for(
    mode: ConditionMode,
    triple: ConfidenceTriple,
    part_masks: Vec<Grid<u8>>,
) -> ConditionChannels {
    let on = triple.0[mode.slot()];
    let off = triple.empty();
    let confidence = part_masks.iter().map(|m| m.map(|&l| if l != 0 { on } else { off })).collect();
    ConditionChannels { mode, triple, part_masks, confidence }
}

/// Builds condition channels. Labeled pixels carry the mode's confidence
/// value; every other pixel carries the empty value.
pub fn build_condition(
    mode: ConditionMode,
    payload: &ConditionPayload,
    triple: ConfidenceTriple,
) -> Result<ConditionChannels, GeometryError> {
    triple.validate().map_err(GeometryError::InvalidTriple)?;
    let masks = match (mode, payload) {
        (ConditionMode::FullMotion, ConditionPayload::FullMotion { frames, camera, splat_radius }) => {
            camera.validate()?;
            frames
                .iter()
                .map(|objects| render_part_masks(objects, camera, *splat_radius))
                .collect::<Result<Vec<_>, _>>()?
        }
        (ConditionMode::TargetPose, ConditionPayload::TargetPose { frames, parts, width, height }) => {
            if *frames == 0 {
                return Err(GeometryError::DimensionMismatch("target pose needs at least one frame".into()));
            }
            let parts: Vec<(u8, Vec<[f64; 2]>)> = parts.iter().map(|p| (p.label, p.points.clone())).collect();
            let last = polygon_target_mask(&parts, *width, *height)?;
            let mut masks = vec![Grid::filled(*width, *height, 0u8); frames - 1];
            masks.push(last);
            masks
        }
        (ConditionMode::Empty, ConditionPayload::Empty { frames, width, height }) => {
            vec![Grid::filled(*width, *height, 0u8); *frames]
        }
        _ => return Err(GeometryError::PayloadMismatch(mode)),
    };
    Ok(channels_for(mode, triple, masks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConfidenceSidecar {
    triple: ConfidenceTriple,
    mode: ConditionMode,
    frames: usize,
}

/// Writes `mask_%04d.pgm`, `conf_%04d.pgm` and `confidence.json` into `dir`.
/// Confidence bytes 2, 1, 0 stand for the triple's values in order.
pub fn write_channels(dir: &Path, channels: &ConditionChannels) -> Result<(), IoError> {
    for (i, (m, c)) in channels.part_masks.iter().zip(&channels.confidence).enumerate() {
        write_pgm8(&dir.join(format!("mask_{i:04}.pgm")), m)?;
        write_pgm8(&dir.join(format!("conf_{i:04}.pgm")), &c.map(|&v| channels.encode(v)))?;
    }
    write_json(
        &dir.join("confidence.json"),
        &ConfidenceSidecar { triple: channels.triple, mode: channels.mode, frames: channels.frames() },
    )
}

pub fn read_channels(dir: &Path) -> Result<ConditionChannels, IoError> {
    let side: ConfidenceSidecar = read_json(&dir.join("confidence.json"))?;
    let mut part_masks = Vec::with_capacity(side.frames);
    let mut confidence = Vec::with_capacity(side.frames);
    for i in 0..side.frames {
        part_masks.push(read_pgm8(&dir.join(format!("mask_{i:04}.pgm")))?);
        let bytes = read_pgm8(&dir.join(format!("conf_{i:04}.pgm")))?;
        confidence.push(bytes.map(|&b| side.triple.0[2 - (b.min(2) as usize)]));
    }
    Ok(ConditionChannels { mode: side.mode, triple: side.triple, part_masks, confidence })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraSpec {
        CameraSpec::centered(60.0, 32, 24)
    }

    fn motion_payload() -> ConditionPayload {
        let frame = vec![vec![
            LabeledPoint { position: [0.0, 0.0, 2.0], label: 3 },
            LabeledPoint { position: [0.2, 0.1, 2.0], label: 4 },
        ]];
        ConditionPayload::FullMotion { frames: vec![frame.clone(), frame], camera: cam(), splat_radius: 2.0 }
    }

    fn check_invariant(ch: &ConditionChannels) {
        for (m, c) in ch.part_masks.iter().zip(&ch.confidence) {
            for (&l, &v) in m.data.iter().zip(&c.data) {
                assert!(ch.triple.0.contains(&v));
                assert_eq!(l == 0, v == ch.triple.empty());
            }
        }
    }

    #[test]
    fn empty_mode_default_triple_is_all_zero() {
        let ch = build_condition(
            ConditionMode::Empty,
            &ConditionPayload::Empty { frames: 3, width: 8, height: 6 },
            ConfidenceTriple::default(),
        )
        .unwrap();
        assert_eq!(ch.frames(), 3);
        assert!(ch.part_masks.iter().all(|m| m.data.iter().all(|&l| l == 0)));
        assert!(ch.confidence.iter().all(|c| c.data.iter().all(|&v| v == 0.0)));
        check_invariant(&ch);
    }

    #[test]
    fn target_pose_marks_final_frame_with_half() {
        let payload = ConditionPayload::TargetPose {
            frames: 4,
            parts: vec![TargetPart { label: 2, points: vec![[2.0, 2.0], [12.0, 3.0], [6.0, 12.0]] }],
            width: 16,
            height: 16,
        };
        let ch = build_condition(ConditionMode::TargetPose, &payload, ConfidenceTriple::default()).unwrap();
        assert!(ch.part_masks[..3].iter().all(|m| m.data.iter().all(|&l| l == 0)));
        assert_eq!(*ch.part_masks[3].get(6, 5), 2);
        assert_eq!(*ch.confidence[3].get(6, 5), 0.5);
        check_invariant(&ch);
    }

    #[test]
    fn full_motion_with_shifted_triple() {
        let triple = ConfidenceTriple([3.0, 2.0, 1.0]);
        let ch = build_condition(ConditionMode::FullMotion, &motion_payload(), triple).unwrap();
        assert_eq!(*ch.part_masks[0].get(16, 12), 3);
        assert_eq!(*ch.confidence[0].get(16, 12), 3.0);
        assert_eq!(*ch.confidence[0].get(0, 0), 1.0);
        assert_eq!(ch.labeled_confidence(), 3.0);
        check_invariant(&ch);
    }

    #[test]
    fn mismatched_payload_is_rejected() {
        let r = build_condition(ConditionMode::Empty, &motion_payload(), ConfidenceTriple::default());
        assert!(matches!(r, Err(GeometryError::PayloadMismatch(ConditionMode::Empty))));
    }

    #[test]
    fn normalized_confidence() {
        for t in [[1.0, 0.5, 0.0], [0.8, 0.5, 0.2], [3.0, 2.0, 1.0]] {
            let t = ConfidenceTriple(t);
            assert_eq!(t.normalized(t.full()), 1.0);
            assert_eq!(t.normalized(t.empty()), 0.0);
        }
        assert!(ConfidenceTriple([0.0, 0.5, 1.0]).validate().is_err());
    }

    #[test]
    fn channels_round_trip_through_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let ch = build_condition(ConditionMode::FullMotion, &motion_payload(), ConfidenceTriple([0.8, 0.5, 0.2])).unwrap();
        write_channels(dir.path(), &ch).unwrap();
        let bytes = read_pgm8(&dir.path().join("conf_0000.pgm")).unwrap();
        assert_eq!(*bytes.get(16, 12), 2);
        assert_eq!(*bytes.get(0, 0), 0);
        assert_eq!(read_channels(dir.path()).unwrap(), ch);
    }
}
