//! Binary pose file format.
//!
//! Little-endian: magic `PSEQ`, u32 version (1), u32 frame count `T`, u32
//! joint count `J`, then `T·J·2` f32 coordinates, frame-major, joint-major,
//! x before y. Coordinates are held as f64 in memory and rounded to f32 on
//! write.

use std::fs;
use std::path::Path;

use super::{DataError, KeypointLayout, PoseSequence, FULL_JOINTS};

pub const POSE_MAGIC: &[u8; 4] = b"PSEQ";
pub const POSE_VERSION: u32 = 1;
pub const POSE_HEADER_LEN: usize = 16;

pub fn write_pose(seq: &PoseSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(POSE_HEADER_LEN + seq.frames().len() * 4);
    out.extend_from_slice(POSE_MAGIC);
    out.extend_from_slice(&POSE_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.n_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.joints() as u32).to_le_bytes());
    for &v in seq.frames() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

/// Parses a pose file image. Only the full 86-point layout is accepted.
pub fn read_pose(bytes: &[u8]) -> Result<PoseSequence, DataError> {
    if bytes.len() < POSE_HEADER_LEN {
        return Err(DataError::Format(format!("header needs {POSE_HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    if &bytes[0..4] != POSE_MAGIC {
        return Err(DataError::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    let version = le_u32(bytes, 4);
    if version != POSE_VERSION {
        return Err(DataError::Format(format!("unsupported version {version}")));
    }
    let t = le_u32(bytes, 8) as usize;
    let j = le_u32(bytes, 12) as usize;
    if j != FULL_JOINTS {
        return Err(DataError::Format(format!("expected {FULL_JOINTS} joints, header says {j}")));
    }
    if t == 0 {
        return Err(DataError::Format("zero frames".into()));
    }
    let payload = &bytes[POSE_HEADER_LEN..];
    let want = t * j * 2 * 4;
    if payload.len() != want {
        return Err(DataError::Corrupt(format!("payload is {} bytes, header implies {want}", payload.len())));
    }
    let frames = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    PoseSequence::new(frames, t, KeypointLayout::full())
}

pub fn load_pose_file(path: impl AsRef<Path>) -> Result<PoseSequence, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    read_pose(&bytes)
}

pub fn write_pose_file(seq: &PoseSequence, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, write_pose(seq)).map_err(|e| DataError::io(path, e))
}
