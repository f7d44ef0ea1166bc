//! Synthetic signing corpus.
//!
//! Every gloss owns a smooth gesture template: a few keyframes of wrist
//! position, hand rotation, finger curl, head offset and mouth opening,
//! interpolated over the gloss's duration. A sentence renders as the
//! concatenation of its glosses' templates, passed through a per-signer
//! style (part-wise rotation/scale/offset and camera framing) and optional
//! Gaussian noise.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use super::dataset::{write_manifest, ManifestRow, Split, MANIFEST_FILE};
use super::{write_pose_file, DataError, KeypointLayout, Part, PoseSequence, FULL_JOINTS};
use crate::rng::{hash_str, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub n_samples: usize,
    /// Inclusive range of glosses per sentence.
    pub sentence_len: (usize, usize),
    /// Inclusive range of frames per gloss.
    pub frames_per_gloss: (usize, usize),
    pub n_signers: usize,
    /// The last `heldout_signers` signers appear only in dev and test.
    pub heldout_signers: usize,
    /// Per-coordinate noise, in pixels.
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 20,
            n_samples: 700,
            sentence_len: (3, 7),
            frames_per_gloss: (8, 14),
            n_signers: 7,
            heldout_signers: 2,
            noise_sigma: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_owned()));
        if self.vocab_size < 2 {
            return bad("synth vocab_size must be at least 2");
        }
        if self.n_samples < 1 {
            return bad("synth n_samples must be at least 1");
        }
        if self.sentence_len.0 < 1 || self.sentence_len.0 > self.sentence_len.1 {
            return bad("synth sentence length range is empty");
        }
        if self.frames_per_gloss.0 < 1 || self.frames_per_gloss.0 > self.frames_per_gloss.1 {
            return bad("synth frames-per-gloss range is empty");
        }
        if self.n_signers < 1 || self.heldout_signers >= self.n_signers.max(1) && self.heldout_signers > 0 {
            return bad("synth needs at least one training signer");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("synth noise_sigma must be non-negative");
        }
        Ok(())
    }
}

const WORDS: [&str; 40] = [
    "QUESTION", "HE", "FRIEND", "SCHOOL", "HOUSE", "TEACHER", "NO", "I", "INQUIRY", "YOU", "WORK", "EAT", "GO",
    "COME", "FAMILY", "WATER", "GOOD", "BAD", "TODAY", "TOMORROW", "YESTERDAY", "HELP", "WANT", "KNOW", "BOOK",
    "CAR", "CITY", "DOCTOR", "MOTHER", "FATHER", "NAME", "WHERE", "WHAT", "WHY", "HOW", "MANY", "PLAY", "SLEEP",
    "READ", "WRITE",
];

/// Gloss names for a synthetic vocabulary of `n` words.
pub fn gloss_names(n: usize) -> Vec<String> {
    (0..n).map(|i| WORDS.get(i).map_or_else(|| format!("G{i:03}"), |w| (*w).to_owned())).collect()
}

const KEYFRAMES: usize = 3;

#[derive(Debug, Clone, Copy)]
struct HandKey {
    dx: f64,
    dy: f64,
    angle: f64,
    curl: [f64; 5],
}

#[derive(Debug, Clone, Copy)]
struct Keyframe {
    hands: [HandKey; 2],
    head: (f64, f64),
    mouth: f64,
    sway: f64,
}

#[derive(Debug, Clone)]
struct GestureTemplate {
    keys: [Keyframe; KEYFRAMES],
    base_frames: f64,
}

#[derive(Debug, Clone, Copy)]
struct Similarity {
    angle: f64,
    scale: f64,
    dx: f64,
    dy: f64,
}

impl Similarity {
    fn apply(&self, p: (f64, f64), c: (f64, f64)) -> (f64, f64) {
        let (s, co) = self.angle.sin_cos();
        let (x, y) = (p.0 - c.0, p.1 - c.1);
        (
            c.0 + self.scale * (co * x - s * y) + self.dx,
            c.1 + self.scale * (s * x + co * y) + self.dy,
        )
    }
}

#[derive(Debug, Clone)]
struct SignerStyle {
    parts: [Similarity; 4],
    camera: Similarity,
}

/// The fixed gesture templates and signer styles of one synthetic world.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    cfg: SynthConfig,
    seed: u64,
    glosses: Vec<String>,
    templates: Vec<GestureTemplate>,
    signers: Vec<SignerStyle>,
    rest: Vec<(f64, f64)>,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn smoothstep(u: f64) -> f64 {
    u * u * (3.0 - 2.0 * u)
}

const CANVAS_CENTER: (f64, f64) = (256.0, 256.0);
const R_SHOULDER: usize = 2;
const R_ELBOW: usize = 3;
const R_WRIST: usize = 4;
const L_SHOULDER: usize = 5;
const L_ELBOW: usize = 6;
const L_WRIST: usize = 7;

/// Rest pose of the 86-point skeleton in pixel coordinates.
fn rest_skeleton() -> Vec<(f64, f64)> {
    let mut pts = vec![
        (256.0, 110.0), // nose
        (256.0, 170.0), // neck
        (200.0, 180.0),
        (175.0, 260.0),
        (190.0, 330.0),
        (312.0, 180.0),
        (337.0, 260.0),
        (322.0, 330.0),
        (256.0, 380.0),
        (226.0, 380.0),
        (286.0, 380.0),
        (244.0, 100.0),
        (268.0, 100.0),
        (230.0, 108.0),
        (282.0, 108.0),
    ];
    for k in 0..10 {
        pts.push((216.0 + 20.0 * (k % 5) as f64, 230.0 + 60.0 * (k / 5) as f64));
    }
    for k in 0..19 {
        let a = 2.0 * PI * k as f64 / 19.0;
        pts.push((256.0 + 28.0 * a.cos(), 110.0 + 36.0 * a.sin()));
    }
    let left = (pts[L_WRIST].0, pts[L_WRIST].1);
    let right = (pts[R_WRIST].0, pts[R_WRIST].1);
    pts.extend(hand_shape(left, 0.0, &[0.0; 5], -1.0));
    pts.extend(hand_shape(right, 0.0, &[0.0; 5], 1.0));
    debug_assert_eq!(pts.len(), FULL_JOINTS);
    pts
}

/// 21 hand keypoints: wrist, then four joints for each of five fingers.
fn hand_shape(wrist: (f64, f64), angle: f64, curl: &[f64; 5], side: f64) -> Vec<(f64, f64)> {
    const RADII: [f64; 4] = [12.0, 22.0, 30.0, 37.0];
    let mut out = Vec::with_capacity(21);
    out.push(wrist);
    for (f, &c) in curl.iter().enumerate() {
        let spread = side * (f as f64 - 2.0) * 0.35;
        let a = -PI / 2.0 + spread + angle;
        let len_scale = if f == 0 { 0.75 } else { 1.0 };
        for (k, &r) in RADII.iter().enumerate() {
            let r = if k == 0 { r } else { RADII[0] + (r - RADII[0]) * (1.0 - 0.7 * c) };
            let bend = a + side * c * 0.4 * k as f64;
            out.push((wrist.0 + len_scale * r * bend.cos(), wrist.1 + len_scale * r * bend.sin()));
        }
    }
    out
}

fn centroid(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    (sx / n, sy / n)
}

impl SynthWorld {
    pub fn new(cfg: SynthConfig, seed: u64) -> Result<Self, DataError> {
        cfg.validate()?;
        let glosses = gloss_names(cfg.vocab_size);
        let templates = (0..cfg.vocab_size)
            .map(|g| {
                let mut rng = RngStream::keyed(seed, &[hash_str("template"), g as u64]);
                let keys = std::array::from_fn(|_| Keyframe {
                    hands: std::array::from_fn(|h| {
                        let amp = if h == 1 { 1.0 } else { 0.6 };
                        HandKey {
                            dx: amp * uniform(&mut rng, -90.0, 90.0),
                            dy: amp * uniform(&mut rng, -160.0, 20.0),
                            angle: uniform(&mut rng, -0.8, 0.8),
                            curl: std::array::from_fn(|_| rng.gen::<f64>()),
                        }
                    }),
                    head: (uniform(&mut rng, -6.0, 6.0), uniform(&mut rng, -6.0, 6.0)),
                    mouth: rng.gen::<f64>(),
                    sway: uniform(&mut rng, -5.0, 5.0),
                });
                let (lo, hi) = cfg.frames_per_gloss;
                GestureTemplate { keys, base_frames: uniform(&mut rng, lo as f64, hi as f64) }
            })
            .collect();
        let signers = (0..cfg.n_signers)
            .map(|s| {
                let mut rng = RngStream::keyed(seed, &[hash_str("signer"), s as u64]);
                let mut sim = |a: f64, sc: f64, off: f64| Similarity {
                    angle: uniform(&mut rng, -a, a),
                    scale: uniform(&mut rng, 1.0 - sc, 1.0 + sc),
                    dx: uniform(&mut rng, -off, off),
                    dy: uniform(&mut rng, -off, off),
                };
                let parts = [sim(0.08, 0.06, 6.0), sim(0.1, 0.08, 6.0), sim(0.15, 0.08, 4.0), sim(0.15, 0.08, 4.0)];
                let camera = sim(0.05, 0.15, 30.0);
                SignerStyle { parts, camera }
            })
            .collect();
        Ok(SynthWorld { cfg, seed, glosses, templates, signers, rest: rest_skeleton() })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn glosses(&self) -> &[String] {
        &self.glosses
    }

    pub fn signer_name(s: usize) -> String {
        format!("signer{s:02}")
    }

    /// Frames spent on gloss `g`.
    pub fn duration(&self, g: usize) -> usize {
        let (lo, hi) = self.cfg.frames_per_gloss;
        (self.templates[g].base_frames.round() as usize).clamp(lo, hi)
    }

    fn keyframe_at(&self, g: usize, u: f64) -> Keyframe {
        let keys = &self.templates[g].keys;
        let pos = u * (KEYFRAMES - 1) as f64;
        let i = (pos.floor() as usize).min(KEYFRAMES - 2);
        let w = smoothstep(pos - i as f64);
        let (a, b) = (&keys[i], &keys[i + 1]);
        let lerp = |x: f64, y: f64| x + (y - x) * w;
        Keyframe {
            hands: std::array::from_fn(|h| {
                let (p, q) = (&a.hands[h], &b.hands[h]);
                HandKey {
                    dx: lerp(p.dx, q.dx),
                    dy: lerp(p.dy, q.dy),
                    angle: lerp(p.angle, q.angle),
                    curl: std::array::from_fn(|f| lerp(p.curl[f], q.curl[f])),
                }
            }),
            head: (lerp(a.head.0, b.head.0), lerp(a.head.1, b.head.1)),
            mouth: lerp(a.mouth, b.mouth),
            sway: lerp(a.sway, b.sway),
        }
    }

    fn render_frame(&self, key: &Keyframe, style: &SignerStyle) -> Vec<(f64, f64)> {
        let rest = &self.rest;
        let mut pts = rest.clone();
        for p in pts[..25].iter_mut() {
            p.0 += key.sway;
        }
        for (k, p) in pts[25..44].iter_mut().enumerate() {
            p.0 += key.head.0 + key.sway;
            p.1 += key.head.1;
            let a = 2.0 * PI * k as f64 / 19.0;
            if a.sin() > 0.0 {
                p.1 += 6.0 * key.mouth * a.sin();
            }
        }
        for (h, (wrist_idx, elbow_idx, shoulder_idx, offset, side)) in [
            (L_WRIST, L_ELBOW, L_SHOULDER, 44usize, -1.0),
            (R_WRIST, R_ELBOW, R_SHOULDER, 65usize, 1.0),
        ]
        .into_iter()
        .enumerate()
        {
            let hk = &key.hands[h];
            let wrist = (
                rest[wrist_idx].0 + key.sway + hk.dx,
                rest[wrist_idx].1 + hk.dy,
            );
            let shoulder = pts[shoulder_idx];
            pts[wrist_idx] = wrist;
            pts[elbow_idx] = (
                (shoulder.0 + wrist.0) / 2.0 - side * 12.0,
                (shoulder.1 + wrist.1) / 2.0 + 10.0,
            );
            let hand = hand_shape(wrist, side * hk.angle, &hk.curl, side);
            pts[offset..offset + 21].copy_from_slice(&hand);
        }
        for (pi, part) in Part::ALL.iter().enumerate() {
            let span = part.full_offset()..part.full_offset() + part.size();
            let c = if part.is_hand() { centroid(&pts[span.clone()]) } else { centroid(&rest[span.clone()]) };
            for p in pts[span].iter_mut() {
                *p = style.parts[pi].apply(*p, c);
            }
        }
        for p in pts.iter_mut() {
            *p = style.camera.apply(*p, CANVAS_CENTER);
        }
        pts
    }

    /// Renders a sentence of gloss indices (into [`SynthWorld::glosses`]) for
    /// one signer. With `noise_sigma = 0` the result depends only on the
    /// sentence and the signer. Coordinates are rounded to f32 precision.
    pub fn render(&self, sentence: &[usize], signer: usize, noise_sigma: f64, rng: &mut impl Rng) -> PoseSequence {
        let style = &self.signers[signer];
        let mut frames = Vec::new();
        let mut n = 0;
        for &g in sentence {
            let d = self.duration(g);
            for f in 0..d {
                let u = if d > 1 { f as f64 / (d - 1) as f64 } else { 0.0 };
                let key = self.keyframe_at(g, u);
                for (x, y) in self.render_frame(&key, style) {
                    for v in [x, y] {
                        let noisy = if noise_sigma > 0.0 {
                            v + noise_sigma * rng.sample::<f64, _>(StandardNormal)
                        } else {
                            v
                        };
                        let mut r = noisy as f32 as f64;
                        if r == 0.0 {
                            // keep the (0, 0) missing-point sentinel unambiguous
                            r = f32::MIN_POSITIVE as f64;
                        }
                        frames.push(r);
                    }
                }
                n += 1;
            }
        }
        PoseSequence::new(frames, n, KeypointLayout::full()).expect("rendered frames are well-formed")
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub sample_id: String,
    pub signer: usize,
    pub split: Split,
    pub glosses: Vec<String>,
    pub pose: PoseSequence,
}

impl SynthSample {
    pub fn gloss_text(&self) -> String {
        self.glosses.join(" ")
    }
}

fn split_for(cfg: &SynthConfig, index: usize, signer: usize, heldout_seen: &mut usize) -> Split {
    if cfg.heldout_signers == 0 {
        return match index % 10 {
            8 => Split::Dev,
            9 => Split::Test,
            _ => Split::Train,
        };
    }
    if signer < cfg.n_signers - cfg.heldout_signers {
        return Split::Train;
    }
    *heldout_seen += 1;
    if *heldout_seen % 2 == 1 {
        Split::Dev
    } else {
        Split::Test
    }
}

/// Generates the whole corpus in memory. Signers are assigned round-robin.
pub fn synth_samples(cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthSample>, DataError> {
    let world = SynthWorld::new(cfg.clone(), seed)?;
    let mut heldout_seen = 0;
    Ok((0..cfg.n_samples)
        .map(|i| {
            let mut rng = RngStream::keyed(world.seed, &[hash_str("utterance"), i as u64]);
            let len = rng.gen_range(cfg.sentence_len.0..=cfg.sentence_len.1);
            let sentence: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
            let signer = i % cfg.n_signers;
            let sample_id = format!("s{i:05}");
            let pose = world
                .render(&sentence, signer, cfg.noise_sigma, &mut rng)
                .with_ids(SynthWorld::signer_name(signer), &sample_id);
            SynthSample {
                split: split_for(cfg, i, signer, &mut heldout_seen),
                sample_id,
                signer,
                glosses: sentence.iter().map(|&g| world.glosses[g].clone()).collect(),
                pose,
            }
        })
        .collect())
}

/// Writes `manifest.tsv`, `poses/*.pose` and `{train,dev,test}.txt` under `out`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64, out: impl AsRef<Path>) -> Result<Vec<SynthSample>, DataError> {
    let out = out.as_ref();
    let samples = synth_samples(cfg, seed)?;
    let poses = out.join("poses");
    fs::create_dir_all(&poses).map_err(|e| DataError::io(&poses, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    let mut split_lines: [String; 3] = Default::default();
    for s in &samples {
        let rel = format!("poses/{}.pose", s.sample_id);
        write_pose_file(&s.pose, out.join(&rel))?;
        rows.push(ManifestRow {
            sample_id: s.sample_id.clone(),
            signer_id: SynthWorld::signer_name(s.signer),
            pose_path: rel,
            glosses: s.gloss_text(),
        });
        let k = Split::ALL.iter().position(|&x| x == s.split).expect("known split");
        split_lines[k].push_str(&s.sample_id);
        split_lines[k].push('\n');
    }
    let m = out.join(MANIFEST_FILE);
    fs::write(&m, write_manifest(&rows)).map_err(|e| DataError::io(&m, e))?;
    for (k, split) in Split::ALL.iter().enumerate() {
        let p = out.join(split.file_name());
        fs::write(&p, &split_lines[k]).map_err(|e| DataError::io(&p, e))?;
    }
    Ok(samples)
}
