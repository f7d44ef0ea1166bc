//! Pose sequences, gloss vocabularies, file formats and batching.

mod batch;
pub mod dataset;
mod io;
mod normalize;
pub mod synth;
mod vocab;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

pub use batch::{pad_and_mask, Batch};
pub use dataset::{Dataset, Example, ManifestRow, Split};
pub use io::{load_pose_file, read_pose, write_pose, write_pose_file, POSE_HEADER_LEN, POSE_MAGIC, POSE_VERSION};
pub use normalize::normalize_sequence;
pub use vocab::{GlossSequence, GlossTokenizer, Vocabulary, WhitespaceTokenizer, BOS, EOS, PAD, UNK};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("sequence has no detected keypoints")]
    EmptyPose,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error("manifest error: {0}")]
    Manifest(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io { path: path.into(), source }
    }
}

/// Number of keypoints in the full layout.
pub const FULL_JOINTS: usize = 86;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Body,
    Face,
    LeftHand,
    RightHand,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::Body, Part::Face, Part::LeftHand, Part::RightHand];

    pub fn size(self) -> usize {
        match self {
            Part::Body => 25,
            Part::Face => 19,
            Part::LeftHand | Part::RightHand => 21,
        }
    }

    /// Offset of this part in the full 86-point layout.
    pub fn full_offset(self) -> usize {
        match self {
            Part::Body => 0,
            Part::Face => 25,
            Part::LeftHand => 44,
            Part::RightHand => 65,
        }
    }

    pub fn is_hand(self) -> bool {
        matches!(self, Part::LeftHand | Part::RightHand)
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Body => "body",
            Part::Face => "face",
            Part::LeftHand => "left_hand",
            Part::RightHand => "right_hand",
        }
    }
}

/// A contiguous run of joints belonging to one part.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartSpan {
    pub part: Part,
    pub start: usize,
    pub len: usize,
}

/// Ordered part spans of a (possibly reduced) keypoint set. Parts always
/// appear in the canonical order body, face, left hand, right hand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeypointLayout {
    spans: Vec<PartSpan>,
}

impl KeypointLayout {
    pub fn full() -> Self {
        Self::from_parts(&Part::ALL)
    }

    pub fn from_parts(parts: &[Part]) -> Self {
        let mut sorted = parts.to_vec();
        sorted.sort();
        sorted.dedup();
        let mut start = 0;
        let spans = sorted
            .into_iter()
            .map(|part| {
                let s = PartSpan { part, start, len: part.size() };
                start += part.size();
                s
            })
            .collect();
        KeypointLayout { spans }
    }

    pub fn spans(&self) -> &[PartSpan] {
        &self.spans
    }

    pub fn span(&self, part: Part) -> Option<PartSpan> {
        self.spans.iter().copied().find(|s| s.part == part)
    }

    pub fn joints(&self) -> usize {
        self.spans.iter().map(|s| s.len).sum()
    }

    pub fn is_full(&self) -> bool {
        *self == Self::full()
    }
}

/// Input keypoint subsets used for modality ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Full,
    HandsOnly,
    HandsFace,
    BodyHands,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::HandsFace, Modality::HandsOnly, Modality::BodyHands, Modality::Full];

    pub fn parts(self) -> &'static [Part] {
        match self {
            Modality::Full => &Part::ALL,
            Modality::HandsOnly => &[Part::LeftHand, Part::RightHand],
            Modality::HandsFace => &[Part::Face, Part::LeftHand, Part::RightHand],
            Modality::BodyHands => &[Part::Body, Part::LeftHand, Part::RightHand],
        }
    }

    pub fn joints(self) -> usize {
        self.parts().iter().map(|p| p.size()).sum()
    }

    /// Flattened per-frame feature width, `2·J`.
    pub fn feature_dim(self) -> usize {
        2 * self.joints()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Full => "full",
            Modality::HandsOnly => "hands_only",
            Modality::HandsFace => "hands_face",
            Modality::BodyHands => "body_hands",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Modality::Full),
            "hands_only" => Ok(Modality::HandsOnly),
            "hands_face" => Ok(Modality::HandsFace),
            "body_hands" => Ok(Modality::BodyHands),
            other => Err(DataError::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// `T × J × 2` keypoint coordinates. An exact `(0, 0)` pair marks an
/// undetected keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    frames: Vec<f64>,
    n_frames: usize,
    layout: KeypointLayout,
    pub signer_id: String,
    pub sample_id: String,
}

impl PoseSequence {
    pub fn new(frames: Vec<f64>, n_frames: usize, layout: KeypointLayout) -> Result<Self, DataError> {
        let j = layout.joints();
        if n_frames == 0 {
            return Err(DataError::Format("pose sequence needs at least one frame".into()));
        }
        if frames.len() != n_frames * j * 2 {
            return Err(DataError::Corrupt(format!(
                "expected {} coordinates for {n_frames} frames of {j} joints, got {}",
                n_frames * j * 2,
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Corrupt("non-finite coordinate".into()));
        }
        Ok(PoseSequence { frames, n_frames, layout, signer_id: String::new(), sample_id: String::new() })
    }

    pub fn with_ids(mut self, signer_id: impl Into<String>, sample_id: impl Into<String>) -> Self {
        self.signer_id = signer_id.into();
        self.sample_id = sample_id.into();
        self
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn joints(&self) -> usize {
        self.layout.joints()
    }

    pub fn layout(&self) -> &KeypointLayout {
        &self.layout
    }

    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [f64] {
        &mut self.frames
    }

    /// Coordinates of frame `t`, `J × 2` values.
    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.joints() * 2;
        &self.frames[t * w..(t + 1) * w]
    }

    pub fn point(&self, t: usize, j: usize) -> (f64, f64) {
        let i = (t * self.joints() + j) * 2;
        (self.frames[i], self.frames[i + 1])
    }

    /// Replaces the frames, keeping layout and ids. Used by temporal augmentations.
    pub fn with_frames(&self, frames: Vec<f64>, n_frames: usize) -> Self {
        debug_assert_eq!(frames.len(), n_frames * self.joints() * 2);
        PoseSequence {
            frames,
            n_frames,
            layout: self.layout.clone(),
            signer_id: self.signer_id.clone(),
            sample_id: self.sample_id.clone(),
        }
    }

    pub fn detected_count(&self) -> usize {
        self.frames.chunks_exact(2).filter(|p| is_detected(p[0], p[1])).count()
    }
}

pub fn is_detected(x: f64, y: f64) -> bool {
    x != 0.0 || y != 0.0
}

/// Keeps exactly the parts of `modality`. The input must carry the full layout.
pub fn select_modality(seq: &PoseSequence, modality: Modality) -> Result<PoseSequence, DataError> {
    if !seq.layout.is_full() {
        return Err(DataError::Config("modality selection needs the full 86-point layout".into()));
    }
    let layout = KeypointLayout::from_parts(modality.parts());
    let j_out = layout.joints();
    let mut frames = Vec::with_capacity(seq.n_frames * j_out * 2);
    for t in 0..seq.n_frames {
        let f = seq.frame(t);
        for span in layout.spans() {
            let o = span.part.full_offset() * 2;
            frames.extend_from_slice(&f[o..o + span.len * 2]);
        }
    }
    Ok(PoseSequence {
        frames,
        n_frames: seq.n_frames,
        layout,
        signer_id: seq.signer_id.clone(),
        sample_id: seq.sample_id.clone(),
    })
}
