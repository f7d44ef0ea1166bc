//! Transformer encoder with a per-step classifier trained by CTC.
//!
//! Class 0 is the blank. Gloss vocabulary id `i` is class `i + 1`; the shift
//! only exists inside this module.

use crate::model::{combine_masks, encode_prefix, run_blocks, Bound, Mode, ModelError, ModelKind, ModelParams, Result};
use crate::pose::{Batch, GlossSequence, PoseSequence, UNK};
use crate::tensor::{Tape, Var};

pub const BLANK: usize = 0;

/// Longest sequence [`brute_force_ctc`] will enumerate.
pub const BRUTE_FORCE_MAX_STEPS: usize = 8;

pub fn class_of(vocab_id: usize) -> usize {
    vocab_id + 1
}

/// Per-step log-probabilities of a batch.
pub struct EncoderOutput {
    /// `[B, P, n_classes]`
    pub log_probs: Var,
    pub batch: usize,
    pub steps: usize,
    pub n_classes: usize,
    /// Valid compressed steps per sample.
    pub lengths: Vec<usize>,
}

/// Compressor, bidirectional blocks over valid steps, classifier and log-softmax.
pub fn encoder_forward(
    tape: &mut Tape,
    bound: &Bound,
    poses: &[f64],
    mask: &[bool],
    batch: usize,
    frames: usize,
    mode: &mut Mode,
) -> Result<EncoderOutput> {
    let cfg = bound.config();
    if cfg.kind != ModelKind::Ctc {
        return Err(ModelError::Config(format!("operation needs a ctc model, got {}", cfg.kind)));
    }
    let prefix = encode_prefix(tape, bound, poses, mask, batch, frames, mode)?;
    let s = prefix.len;
    let allowed = combine_masks(&vec![true; s * s], &prefix.valid, batch, s);
    let h = run_blocks(tape, bound, prefix.x, &allowed, mode)?;
    let logits = tape.matmul(h, bound.var("head.w"))?;
    let logits = tape.add_broadcast(logits, bound.var("head.b"))?;
    let log_probs = tape.log_softmax(logits)?;
    let lengths = (0..batch).map(|b| prefix.valid[b * s..(b + 1) * s].iter().filter(|&&v| v).count()).collect();
    Ok(EncoderOutput { log_probs, batch, steps: s, n_classes: cfg.n_classes(), lengths })
}

pub fn encoder_forward_batch(tape: &mut Tape, bound: &Bound, batch: &Batch, mode: &mut Mode) -> Result<EncoderOutput> {
    let dim = bound.config().input_dim;
    if batch.frame_width() != dim {
        return Err(ModelError::Config(format!("batch frame width {} does not match input_dim {dim}", batch.frame_width())));
    }
    encoder_forward(tape, bound, &batch.poses, &batch.pose_mask, batch.size, batch.max_frames, mode)
}

/// Result of the forward recursion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CtcLoss {
    /// Negative log-likelihood, a scalar node.
    Finite(Var),
    /// No alignment of the target fits in the available steps; the loss is +∞.
    Infeasible,
}

/// Minimum number of steps that can emit `target`: one per label plus a
/// separating blank between repeated labels.
pub fn min_steps(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood of `target` (class ids, no blanks) over rows
/// `row0 .. row0 + steps` of a flattened `[rows, n_classes]` log-probability node.
pub fn ctc_loss_rows(tape: &mut Tape, log_probs: Var, n_classes: usize, row0: usize, steps: usize, target: &[usize]) -> Result<CtcLoss> {
    if let Some(&bad) = target.iter().find(|&&c| c == BLANK || c >= n_classes) {
        return Err(ModelError::Config(format!("target class {bad} is blank or out of range")));
    }
    if (row0 + steps) * n_classes > tape.data(log_probs).len() {
        return Err(ModelError::Config("log-probability rows out of range".into()));
    }
    if steps == 0 || steps < min_steps(target) {
        return Ok(CtcLoss::Infeasible);
    }
    let mut ext = vec![BLANK];
    for &c in target {
        ext.push(c);
        ext.push(BLANK);
    }
    let s = ext.len();
    let at = |t: usize, c: usize| Some((row0 + t) * n_classes + c);

    let init: Vec<Option<usize>> = (0..s).map(|i| if i < 2 { at(0, ext[i]) } else { None }).collect();
    let mut alpha = tape.gather(log_probs, &init)?;
    let mut pred = Vec::with_capacity(3 * s);
    for i in 0..s {
        pred.push(Some(i));
        pred.push(i.checked_sub(1));
        pred.push((i >= 2 && ext[i] != BLANK && ext[i] != ext[i - 2]).then(|| i - 2));
    }
    for t in 1..steps {
        let g = tape.gather(alpha, &pred)?;
        let g = tape.reshape(g, vec![s, 3])?;
        let summed = tape.log_sum_exp_rows(g)?;
        let emit: Vec<Option<usize>> = ext.iter().map(|&c| at(t, c)).collect();
        let emit = tape.gather(log_probs, &emit)?;
        alpha = tape.add(summed, emit)?;
    }
    let ends = [Some(s - 1), s.checked_sub(2)];
    let tail = tape.gather(alpha, &ends)?;
    let tail = tape.reshape(tail, vec![1, 2])?;
    let ll = tape.log_sum_exp_rows(tail)?;
    if tape.data(ll)[0] == f64::NEG_INFINITY {
        return Ok(CtcLoss::Infeasible);
    }
    let nll = tape.scale(ll, -1.0);
    Ok(CtcLoss::Finite(tape.sum(nll)))
}

/// CTC loss over a `[T, n_classes]` log-probability node.
pub fn ctc_loss(tape: &mut Tape, log_probs: Var, target: &[usize]) -> Result<CtcLoss> {
    let shape = tape.shape(log_probs).to_vec();
    let [t, c] = shape[..] else {
        return Err(ModelError::Config(format!("ctc_loss expects [T, C] log-probabilities, got {shape:?}")));
    };
    ctc_loss_rows(tape, log_probs, c, 0, t, target)
}

/// Plain-value CTC loss; `+∞` when the target cannot be aligned.
pub fn ctc_loss_value(log_probs: &[f64], n_classes: usize, target: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let lp = tape.constant(vec![log_probs.len() / n_classes, n_classes], log_probs.to_vec())?;
    Ok(match ctc_loss(&mut tape, lp, target)? {
        CtcLoss::Finite(v) => tape.data(v)[0],
        CtcLoss::Infeasible => f64::INFINITY,
    })
}

/// Collapses repeats, then removes blanks.
pub fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != BLANK {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Exhaustive sum over all `n_classes^T` paths. `+∞` when no path collapses
/// to `target`.
pub fn brute_force_ctc(log_probs: &[f64], n_classes: usize, target: &[usize]) -> Result<f64> {
    let t = log_probs.len() / n_classes;
    if t > BRUTE_FORCE_MAX_STEPS {
        return Err(ModelError::Config(format!("brute-force CTC limited to {BRUTE_FORCE_MAX_STEPS} steps, got {t}")));
    }
    let mut path = vec![0usize; t];
    let mut terms = Vec::new();
    loop {
        if collapse_path(&path) == target {
            terms.push(path.iter().enumerate().map(|(i, &c)| log_probs[i * n_classes + c]).sum::<f64>());
        }
        let mut i = 0;
        while i < t {
            path[i] += 1;
            if path[i] < n_classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == t {
            break;
        }
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(f64::INFINITY);
    }
    Ok(-(m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln()))
}

/// Per-step arg-max (lowest class on ties), collapsed.
pub fn ctc_greedy_classes(log_probs: &[f64], n_classes: usize) -> Vec<usize> {
    let path: Vec<usize> = log_probs
        .chunks_exact(n_classes)
        .map(|row| row.iter().enumerate().fold(0, |b, (c, &v)| if v > row[b] { c } else { b }))
        .collect();
    collapse_path(&path)
}

/// Greedy CTC decoding to gloss ids. Classes for PAD/BOS/EOS/UNK are dropped.
pub fn ctc_greedy_decode(log_probs: &[f64], n_classes: usize) -> GlossSequence {
    let ids = ctc_greedy_classes(log_probs, n_classes).into_iter().map(|c| c - 1).filter(|&id| id > UNK).collect();
    GlossSequence::new(ids).expect("special ids were filtered")
}

/// Mean over feasible samples of the per-sample CTC loss divided by target
/// length. `None` when no sample of the batch is feasible.
pub fn ctc_batch_loss(tape: &mut Tape, bound: &Bound, batch: &Batch, targets: &[GlossSequence], mode: &mut Mode) -> Result<Option<Var>> {
    let out = encoder_forward_batch(tape, bound, batch, mode)?;
    let mut total: Option<Var> = None;
    let mut feasible = 0usize;
    for (b, target) in targets.iter().enumerate() {
        let classes: Vec<usize> = target.ids().iter().map(|&i| class_of(i)).collect();
        let loss = ctc_loss_rows(tape, out.log_probs, out.n_classes, b * out.steps, out.lengths[b], &classes)?;
        let CtcLoss::Finite(l) = loss else {
            log::warn!("sample {b}: target of {} glosses cannot align to {} steps", classes.len(), out.lengths[b]);
            continue;
        };
        let l = tape.scale(l, 1.0 / classes.len().max(1) as f64);
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
        feasible += 1;
    }
    Ok(total.map(|t| tape.scale(t, 1.0 / feasible as f64)))
}

/// Greedy decoding of one pose sequence (already modality-selected and normalized).
pub fn ctc_decode(params: &ModelParams, pose: &PoseSequence) -> Result<GlossSequence> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let mask = vec![true; pose.n_frames()];
    let out = encoder_forward(&mut tape, &bound, pose.frames(), &mask, 1, pose.n_frames(), &mut Mode::Eval)?;
    let lp = &tape.data(out.log_probs)[..out.lengths[0] * out.n_classes];
    Ok(ctc_greedy_decode(lp, out.n_classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn log_softmax_rows(x: &[f64], c: usize) -> Vec<f64> {
        x.chunks_exact(c)
            .flat_map(|r| {
                let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                r.iter().map(move |v| v - z)
            })
            .collect()
    }

    #[test]
    fn forced_single_path() {
        let lp = [0.0, f64::NEG_INFINITY];
        assert_eq!(ctc_loss_value(&lp, 2, &[]).unwrap(), 0.0);
        assert_eq!(brute_force_ctc(&lp, 2, &[]).unwrap(), 0.0);
    }

    #[test]
    fn two_step_uniform() {
        let h = 0.5f64.ln();
        let lp = [h, h, h, h];
        let want = -(0.75f64.ln());
        assert!((ctc_loss_value(&lp, 2, &[1]).unwrap() - want).abs() < 1e-12);
        assert!((brute_force_ctc(&lp, 2, &[1]).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.28768).abs() < 1e-5);
    }

    #[test]
    fn single_step_single_token() {
        let lp = log_softmax_rows(&[0.3, 1.2, -0.4], 3);
        assert!((ctc_loss_value(&lp, 3, &[2]).unwrap() + lp[2]).abs() < 1e-12);
        assert!((brute_force_ctc(&lp, 3, &[2]).unwrap() + lp[2]).abs() < 1e-12);
    }

    #[test]
    fn infeasible_targets_give_infinity() {
        let lp = log_softmax_rows(&[0.0; 6], 3);
        assert_eq!(ctc_loss_value(&lp, 3, &[1, 2, 1]).unwrap(), f64::INFINITY);
        assert_eq!(brute_force_ctc(&lp, 3, &[1, 2, 1]).unwrap(), f64::INFINITY);
        // a repeated label needs a blank in between
        assert_eq!(ctc_loss_value(&lp, 3, &[1, 1]).unwrap(), f64::INFINITY);
        assert!(ctc_loss_value(&lp, 3, &[0]).is_err());
        assert!(brute_force_ctc(&[0.0; 9 * 2], 2, &[1]).is_err());
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t = rng.gen_range(1..=6);
            let v = rng.gen_range(1..=3);
            let c = v + 1;
            let raw: Vec<f64> = (0..t * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let lp = log_softmax_rows(&raw, c);
            let len = rng.gen_range(0..=t);
            let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..c)).collect();
            let a = ctc_loss_value(&lp, c, &target).unwrap();
            let b = brute_force_ctc(&lp, c, &target).unwrap();
            if b.is_infinite() {
                assert!(a.is_infinite());
            } else {
                assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
                assert!((-a).exp() > 0.0 && (-a).exp() <= 1.0);
            }
        }
    }

    #[test]
    fn greedy_decode_rules() {
        // classes: 0 blank, 5 and 6 map to vocab ids 4 and 5
        let row = |c: usize| {
            let mut r = vec![-5.0; 7];
            r[c] = 0.0;
            r
        };
        let path = |cs: &[usize]| cs.iter().flat_map(|&c| row(c)).collect::<Vec<f64>>();
        assert_eq!(ctc_greedy_decode(&path(&[5, 5, 0, 5]), 7).ids(), &[4, 4]);
        assert!(ctc_greedy_decode(&path(&[0, 0, 0]), 7).is_empty());
        assert_eq!(ctc_greedy_decode(&path(&[0, 6, 6, 0, 6]), 7).ids(), &[5, 5]);
        assert_eq!(collapse_path(&[1, 1, 0, 1]), vec![1, 1]);
    }
}
