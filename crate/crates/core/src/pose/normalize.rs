use super::{is_detected, DataError, PoseSequence};

/// Per-sequence, per-axis affine map of the detected keypoints' bounding box
/// onto `[-1, 1]`.
///
/// Undetected `(0, 0)` points are left as they are. An axis with zero extent
/// maps to 0.
pub fn normalize_sequence(seq: &PoseSequence) -> Result<PoseSequence, DataError> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in seq.frames().chunks_exact(2) {
        if is_detected(p[0], p[1]) {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    if lo[0] > hi[0] {
        return Err(DataError::EmptyPose);
    }
    let mut out = seq.clone();
    for p in out.frames_mut().chunks_exact_mut(2) {
        if !is_detected(p[0], p[1]) {
            continue;
        }
        for a in 0..2 {
            let extent = hi[a] - lo[a];
            p[a] = if extent > 0.0 { 2.0 * (p[a] - lo[a]) / extent - 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}
