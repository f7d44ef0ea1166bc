//! Training-time pose augmentations.
//!
//! All functions are pure given their random stream: the same input, config
//! and [`RngStream`](crate::rng::RngStream) substream give the same output.
//! Undetected `(0, 0)` keypoints are never moved by the geometric
//! augmentations.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::pose::{is_detected, Part, PoseSequence};

#[derive(Debug, Clone, PartialEq)]
pub struct PartAwareConfig {
    pub enabled: bool,
    pub hand_rot_max_deg: f64,
    pub hand_scale_range: (f64, f64),
    pub face_jitter_sigma: f64,
    pub body_jitter_sigma: f64,
}

impl Default for PartAwareConfig {
    fn default() -> Self {
        PartAwareConfig {
            enabled: true,
            hand_rot_max_deg: 10.0,
            hand_scale_range: (0.9, 1.1),
            face_jitter_sigma: 0.005,
            body_jitter_sigma: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugConfig {
    pub enabled: bool,
    pub jitter_sigma: f64,
    pub scale_range: (f64, f64),
    pub temporal_mask_p: f64,
    pub frame_dropout_p: f64,
    pub time_warp_max_shift: usize,
    pub per_aug_apply_p: f64,
    pub part_aware: PartAwareConfig,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            enabled: true,
            jitter_sigma: 0.01,
            scale_range: (0.85, 1.15),
            temporal_mask_p: 0.15,
            frame_dropout_p: 0.05,
            time_warp_max_shift: 1,
            per_aug_apply_p: 0.5,
            part_aware: PartAwareConfig::default(),
        }
    }
}

impl AugConfig {
    /// Every augmentation switched off.
    pub fn none() -> Self {
        AugConfig { enabled: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(format!("{name} must lie in [0, 1], got {p}"))
            }
        };
        prob("augment.temporal_mask_p", self.temporal_mask_p)?;
        prob("augment.per_aug_apply_p", self.per_aug_apply_p)?;
        if !(0.0..1.0).contains(&self.frame_dropout_p) {
            return Err(format!("augment.frame_dropout_p must lie in [0, 1), got {}", self.frame_dropout_p));
        }
        for (name, (lo, hi)) in [("augment.scale", self.scale_range), ("augment.hand_scale", self.part_aware.hand_scale_range)] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(format!("{name} range must satisfy 0 < min <= max, got [{lo}, {hi}]"));
            }
        }
        for (name, s) in [
            ("augment.jitter_sigma", self.jitter_sigma),
            ("augment.face_jitter_sigma", self.part_aware.face_jitter_sigma),
            ("augment.body_jitter_sigma", self.part_aware.body_jitter_sigma),
            ("augment.hand_rot_max_deg", self.part_aware.hand_rot_max_deg),
        ] {
            if !(s >= 0.0) {
                return Err(format!("{name} must be non-negative, got {s}"));
            }
        }
        Ok(())
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn uniform_in(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.gen();
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * u
    }
}

/// Adds i.i.d. `N(0, sigma²)` to every coordinate of every detected keypoint.
pub fn gaussian_jitter(seq: &PoseSequence, sigma: f64, rng: &mut impl Rng) -> PoseSequence {
    let mut out = seq.clone();
    for p in out.frames_mut().chunks_exact_mut(2) {
        if is_detected(p[0], p[1]) {
            p[0] += sigma * normal(rng);
            p[1] += sigma * normal(rng);
        }
    }
    out
}

fn detected_centroid(points: impl Iterator<Item = (f64, f64)>) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in points.filter(|&(x, y)| is_detected(x, y)) {
        sx += x;
        sy += y;
        n += 1;
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

/// Scales every detected point by one uniform factor about the sequence's
/// detected-keypoint centroid.
pub fn random_scale(seq: &PoseSequence, range: (f64, f64), rng: &mut impl Rng) -> PoseSequence {
    let s = uniform_in(rng, range);
    scale_about_centroid(seq, s)
}

/// Deterministic core of [`random_scale`].
pub fn scale_about_centroid(seq: &PoseSequence, s: f64) -> PoseSequence {
    let mut out = seq.clone();
    if s == 1.0 {
        return out;
    }
    let Some((cx, cy)) = detected_centroid(seq.frames().chunks_exact(2).map(|p| (p[0], p[1]))) else {
        return out;
    };
    for p in out.frames_mut().chunks_exact_mut(2) {
        if is_detected(p[0], p[1]) {
            p[0] = cx + s * (p[0] - cx);
            p[1] = cy + s * (p[1] - cy);
        }
    }
    out
}

/// Zeroes each frame independently with probability `p`.
pub fn temporal_mask(seq: &PoseSequence, p: f64, rng: &mut impl Rng) -> PoseSequence {
    let mut out = seq.clone();
    let w = seq.joints() * 2;
    for frame in out.frames_mut().chunks_exact_mut(w) {
        if rng.gen::<f64>() < p {
            frame.fill(0.0);
        }
    }
    out
}

/// Deletes each frame independently with probability `p`, always keeping at
/// least frame 0.
pub fn frame_dropout(seq: &PoseSequence, p: f64, rng: &mut impl Rng) -> PoseSequence {
    let keep: Vec<usize> = (0..seq.n_frames()).filter(|_| rng.gen::<f64>() >= p).collect();
    let keep = if keep.is_empty() { vec![0] } else { keep };
    if keep.len() == seq.n_frames() {
        return seq.clone();
    }
    let mut frames = Vec::with_capacity(keep.len() * seq.joints() * 2);
    for &t in &keep {
        frames.extend_from_slice(seq.frame(t));
    }
    seq.with_frames(frames, keep.len())
}

/// Output frame `t` copies input frame `clamp(t + δ, 0, T−1)` with δ uniform
/// in `−max_shift..=max_shift`.
pub fn time_warp(seq: &PoseSequence, max_shift: usize, rng: &mut impl Rng) -> PoseSequence {
    if max_shift == 0 {
        return seq.clone();
    }
    let t_len = seq.n_frames() as isize;
    let m = max_shift as isize;
    let mut frames = Vec::with_capacity(seq.frames().len());
    for t in 0..t_len {
        let src = (t + rng.gen_range(-m..=m)).clamp(0, t_len - 1);
        frames.extend_from_slice(seq.frame(src as usize));
    }
    seq.with_frames(frames, seq.n_frames())
}

/// Applies `A·(p − c) + c + shift` to every detected point of `part` in every
/// frame, with `c` the part's per-frame detected centroid when `per_frame`
/// is set and its whole-sequence centroid otherwise.
fn transform_part(seq: &mut PoseSequence, part: Part, a: [[f64; 2]; 2], shift: (f64, f64), per_frame: bool) {
    let Some(span) = seq.layout().span(part) else {
        return;
    };
    let j = seq.joints();
    let t_len = seq.n_frames();
    let range = |t: usize| (t * j + span.start) * 2..(t * j + span.start + span.len) * 2;
    let whole = detected_centroid((0..t_len).flat_map(|t| {
        let r = range(t);
        let f = &seq.frames()[r];
        (0..span.len).map(move |k| (f[2 * k], f[2 * k + 1]))
    }));
    for t in 0..t_len {
        let r = range(t);
        let frame = &mut seq.frames_mut()[r];
        let c = if per_frame {
            detected_centroid(frame.chunks_exact(2).map(|p| (p[0], p[1])))
        } else {
            whole
        };
        let Some((cx, cy)) = c else { continue };
        for p in frame.chunks_exact_mut(2) {
            if is_detected(p[0], p[1]) {
                let (x, y) = (p[0] - cx, p[1] - cy);
                p[0] = cx + a[0][0] * x + a[0][1] * y + shift.0;
                p[1] = cy + a[1][0] * x + a[1][1] * y + shift.1;
            }
        }
    }
}

/// Hand rotation/scale (independent per hand, about each frame's hand
/// centroid), a slight affine jitter of the face and a global shift of the
/// body. Parts missing from the layout are skipped.
pub fn part_aware_augment(seq: &PoseSequence, cfg: &PartAwareConfig, rng: &mut impl Rng) -> PoseSequence {
    let mut out = seq.clone();
    for hand in [Part::LeftHand, Part::RightHand] {
        let max = cfg.hand_rot_max_deg.to_radians();
        let angle = uniform_in(rng, (-max, max));
        let s = uniform_in(rng, cfg.hand_scale_range);
        if (angle != 0.0 || s != 1.0) && out.layout().span(hand).is_some() {
            let (sn, cs) = angle.sin_cos();
            transform_part(&mut out, hand, [[s * cs, -s * sn], [s * sn, s * cs]], (0.0, 0.0), true);
        }
    }
    let fs = cfg.face_jitter_sigma;
    let a = [[1.0 + fs * normal(rng), fs * normal(rng)], [fs * normal(rng), 1.0 + fs * normal(rng)]];
    let shift = (fs * normal(rng), fs * normal(rng));
    if fs > 0.0 {
        transform_part(&mut out, Part::Face, a, shift, false);
    }
    let bs = cfg.body_jitter_sigma;
    let shift = (bs * normal(rng), bs * normal(rng));
    if bs > 0.0 {
        transform_part(&mut out, Part::Body, [[1.0, 0.0], [0.0, 1.0]], shift, false);
    }
    out
}

/// Runs part-aware → jitter → scale → temporal mask → frame dropout → time
/// warp, each behind its own Bernoulli(`per_aug_apply_p`) gate.
pub fn apply_pipeline(seq: &PoseSequence, cfg: &AugConfig, rng: &mut impl Rng) -> PoseSequence {
    if !cfg.enabled {
        return seq.clone();
    }
    let p = cfg.per_aug_apply_p;
    let gate = |rng: &mut dyn rand::RngCore| rng.gen::<f64>() < p;
    let mut out = seq.clone();
    if gate(rng) && cfg.part_aware.enabled {
        out = part_aware_augment(&out, &cfg.part_aware, rng);
    }
    if gate(rng) {
        out = gaussian_jitter(&out, cfg.jitter_sigma, rng);
    }
    if gate(rng) {
        out = random_scale(&out, cfg.scale_range, rng);
    }
    if gate(rng) {
        out = temporal_mask(&out, cfg.temporal_mask_p, rng);
    }
    if gate(rng) {
        out = frame_dropout(&out, cfg.frame_dropout_p, rng);
    }
    if gate(rng) {
        out = time_warp(&out, cfg.time_warp_max_shift, rng);
    }
    out
}
