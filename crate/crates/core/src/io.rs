//! On-disk formats: motion JSON, binary PGM images and their JSON sidecars,
//! and clip directories.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;
use crate::motion::{Category, MotionSequence, ParametricModelSpec};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed JSON in {path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::Format { path: path.display().to_string(), reason: reason.into() }
}

/// Compact JSON formatter that writes every float with 17 significant
/// digits, so values round-trip exactly and the output is byte-stable.
#[derive(Default)]
pub struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Serializes with [`FullPrecision`] floats.
pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FullPrecision);
    value.serialize(&mut ser).expect("in-memory serialization cannot fail");
    out.push(b'\n');
    String::from_utf8(out).expect("JSON is UTF-8")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, to_json_string(value)).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|source| IoError::Json { path: path.display().to_string(), source })
}

pub const MOTION_FORMAT_VERSION: &str = "1";

/// Motion JSON, version "1".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionFile {
    pub version: String,
    pub category: Category,
    pub pose_dim: usize,
    pub shape_dim: usize,
    pub expression_dim: usize,
    pub fps: f64,
    pub frames: Vec<Vec<f64>>,
}

impl From<&MotionSequence> for MotionFile {
    fn from(seq: &MotionSequence) -> Self {
        MotionFile {
            version: MOTION_FORMAT_VERSION.to_string(),
            category: seq.category(),
            pose_dim: seq.pose_dim(),
            shape_dim: seq.model.shape_dim,
            expression_dim: seq.model.expression_dim,
            fps: seq.fps,
            frames: seq.frames.clone(),
        }
    }
}

impl MotionFile {
    /// Rebuilds a sequence against the category preset.
    pub fn into_sequence(self) -> Result<MotionSequence, String> {
        if self.version != MOTION_FORMAT_VERSION {
            return Err(format!("unsupported motion format version {:?}", self.version));
        }
        let model = ParametricModelSpec::preset(self.category);
        if model.pose_dim != self.pose_dim {
            return Err(format!(
                "pose_dim {} does not match the {} model ({})",
                self.pose_dim,
                self.category.name(),
                model.pose_dim
            ));
        }
        let seq = MotionSequence::new(model, self.fps, self.frames);
        let violations = seq.validate();
        if violations.is_empty() {
            Ok(seq)
        } else {
            Err(format!("invalid motion: {violations:?}"))
        }
    }
}

pub fn write_motion(path: &Path, seq: &MotionSequence) -> Result<(), IoError> {
    write_json(path, &MotionFile::from(seq))
}

pub fn read_motion(path: &Path) -> Result<MotionSequence, IoError> {
    let file: MotionFile = read_json(path)?;
    file.into_sequence().map_err(|reason| format_err(path, reason))
}

/// Several objects' motions in one file (`{"objects": [...]}`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionSetFile {
    pub objects: Vec<MotionFile>,
}

pub fn write_motion_set(path: &Path, motions: &[MotionSequence]) -> Result<(), IoError> {
    write_json(path, &MotionSetFile { objects: motions.iter().map(MotionFile::from).collect() })
}

pub fn read_motion_set(path: &Path) -> Result<Vec<MotionSequence>, IoError> {
    let file: MotionSetFile = read_json(path)?;
    file.objects
        .into_iter()
        .map(|m| m.into_sequence().map_err(|reason| format_err(path, reason)))
        .collect()
}

fn pgm_header(width: usize, height: usize, maxval: u32) -> Vec<u8> {
    format!("P5\n{width} {height}\n{maxval}\n").into_bytes()
}

/// 8-bit binary PGM.
pub fn encode_pgm8(grid: &Grid<u8>) -> Vec<u8> {
    let mut out = pgm_header(grid.width, grid.height, 255);
    out.extend_from_slice(&grid.data);
    out
}

/// 16-bit binary PGM (samples big-endian, as the format requires).
pub fn encode_pgm16(grid: &Grid<u16>) -> Vec<u8> {
    let mut out = pgm_header(grid.width, grid.height, 65535);
    for v in &grid.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub enum PgmData {
    Eight(Grid<u8>),
    Sixteen(Grid<u16>),
}

pub fn decode_pgm(bytes: &[u8]) -> Result<PgmData, String> {
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if tokens[0] != "P5" {
        return Err(format!("expected P5 magic, found {:?}", tokens[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if maxval < 256 {
        let data = raster.get(..width * height).ok_or("truncated raster")?.to_vec();
        Ok(PgmData::Eight(Grid { width, height, data }))
    } else {
        let raw = raster.get(..2 * width * height).ok_or("truncated raster")?;
        let data = raw.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
        Ok(PgmData::Sixteen(Grid { width, height, data }))
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn write_pgm8(path: &Path, grid: &Grid<u8>) -> Result<(), IoError> {
    write_bytes(path, &encode_pgm8(grid))
}

pub fn read_pgm8(path: &Path) -> Result<Grid<u8>, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    match decode_pgm(&bytes).map_err(|r| format_err(path, r))? {
        PgmData::Eight(g) => Ok(g),
        PgmData::Sixteen(_) => Err(format_err(path, "expected an 8-bit PGM")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthSidecar {
    pub scale: f64,
}

/// Writes a depth map as a 16-bit PGM plus `<stem>.json` holding the scale.
pub fn write_depth(path: &Path, depth: &Grid<f64>, scale: f64) -> Result<(), IoError> {
    let steps = depth.map(|&d| (d / scale).round().clamp(0.0, 65535.0) as u16);
    write_bytes(path, &encode_pgm16(&steps))?;
    write_json(&path.with_extension("json"), &DepthSidecar { scale })
}

pub fn read_depth(path: &Path) -> Result<(Grid<f64>, f64), IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let sidecar: DepthSidecar = read_json(&path.with_extension("json"))?;
    let grid = match decode_pgm(&bytes).map_err(|r| format_err(path, r))? {
        PgmData::Sixteen(g) => g.map(|&v| v as f64 * sidecar.scale),
        PgmData::Eight(g) => g.map(|&v| v as f64 * sidecar.scale),
    };
    Ok((grid, sidecar.scale))
}
