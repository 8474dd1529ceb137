//! Binary checkpoint: `"PMP1"`, config-JSON length (u64 LE), config JSON,
//! then every tensor in declaration order as f64 LE.

use std::io::{Read, Write};
use std::path::Path;

use super::config::PmpConfig;
use super::model::PmpModel;
use super::PmpError;

const MAGIC: &[u8; 4] = b"PMP1";

fn ck(e: impl std::fmt::Display) -> PmpError {
    PmpError::Checkpoint(e.to_string())
}

pub fn write_checkpoint<W: Write>(model: &PmpModel, mut w: W) -> Result<(), PmpError> {
    let json = serde_json::to_vec(&model.config).map_err(ck)?;
    w.write_all(MAGIC).map_err(ck)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(ck)?;
    w.write_all(&json).map_err(ck)?;
    let mut buf = Vec::with_capacity(model.params.parameter_count() * 8);
    for t in model.params.tensors() {
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(ck)?;
    w.flush().map_err(ck)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<PmpModel, PmpError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(ck)?;
    if &magic != MAGIC {
        return Err(PmpError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(ck)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 24 {
        return Err(PmpError::Checkpoint(format!("config length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(ck)?;
    let config: PmpConfig = serde_json::from_slice(&json).map_err(ck)?;
    let mut model = PmpModel::init(config, 0)?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(ck)?;
    let expected = model.params.parameter_count() * 8;
    if bytes.len() != expected {
        return Err(PmpError::Checkpoint(format!("expected {expected} tensor bytes, found {}", bytes.len())));
    }
    let mut chunks = bytes.chunks_exact(8);
    for t in model.params.tensors_mut() {
        for v in t.iter_mut() {
            *v = f64::from_le_bytes(chunks.next().expect("length checked").try_into().expect("8 bytes"));
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &PmpModel, path: &Path) -> Result<(), PmpError> {
    let f = std::fs::File::create(path).map_err(|e| ck(format!("{}: {e}", path.display())))?;
    write_checkpoint(model, std::io::BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<PmpModel, PmpError> {
    let f = std::fs::File::open(path).map_err(|e| ck(format!("{}: {e}", path.display())))?;
    read_checkpoint(std::io::BufReader::new(f))
}
