//! Forward passes: compressor, block stack, teacher forcing and generation.

use rand::Rng;

use crate::pose::{pad_and_mask, Batch, GlossSequence, PoseSequence, BOS, EOS, PAD};
use crate::rng::RngStream;
use crate::tensor::{Tape, Var};

use super::decode::{beam_search, greedy_search, Hypothesis};
use super::{Bound, ModelError, ModelKind, ModelParams, Result};

const LN_EPS: f64 = 1e-5;

/// Evaluation runs deterministically; training draws dropout masks from the
/// given stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut RngStream),
}

fn dropout(tape: &mut Tape, x: Var, p: f64, mode: &mut Mode) -> Result<Var> {
    let Mode::Train(rng) = mode else {
        return Ok(x);
    };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask = (0..tape.data(x).len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
    Ok(tape.mul_const(x, mask)?)
}

/// Validity of each output step of one strided convolution: a step is valid
/// iff the input frame under the centre of its kernel is valid.
pub fn downsample_mask(valid: &[bool], batch: usize, len: usize, kernel: usize, stride: usize, padding: usize) -> Option<(Vec<bool>, usize)> {
    let out = crate::tensor::conv_out_len(len, kernel, stride, padding)?;
    let mut mask = vec![false; batch * out];
    for b in 0..batch {
        for t in 0..out {
            let c = (t * stride + (kernel - 1) / 2) as isize - padding as isize;
            mask[b * out + t] = c >= 0 && (c as usize) < len && valid[b * len + c as usize];
        }
    }
    Some((mask, out))
}

/// Lower-triangular `S × S` mask over a prefix followed by text, `S = t_prefix + t_text`.
pub fn build_causal_mask(t_prefix: usize, t_text: usize) -> Vec<bool> {
    let s = t_prefix + t_text;
    (0..s * s).map(|k| k % s <= k / s).collect()
}

/// Per-sample `[B, S, S]` mask: `base[i, j]` and key `j` valid.
pub fn combine_masks(base: &[bool], valid: &[bool], batch: usize, s: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(batch * s * s);
    for b in 0..batch {
        let v = &valid[b * s..(b + 1) * s];
        for i in 0..s {
            out.extend((0..s).map(|j| base[i * s + j] && v[j]));
        }
    }
    out
}

/// Compressed pose prefix of a batch.
pub struct Prefix {
    /// `[B, P, d_model]`
    pub x: Var,
    /// `B × P`
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

/// Runs the compressor over `poses` (`B × T × input_dim`, zero padded) and
/// projects to `d_model`, adding prefix positional embeddings.
pub fn encode_prefix(
    tape: &mut Tape,
    bound: &Bound,
    poses: &[f64],
    mask: &[bool],
    batch: usize,
    frames: usize,
    mode: &mut Mode,
) -> Result<Prefix> {
    let cfg = bound.config();
    let dim = cfg.input_dim;
    if poses.len() != batch * frames * dim || mask.len() != batch * frames {
        return Err(ModelError::Config(format!(
            "pose input of {} values does not match batch {batch} × frames {frames} × input_dim {dim}",
            poses.len()
        )));
    }
    let c = cfg.compressor;
    let min_ok = c.out_len(frames).is_some_and(|l| l > 0);
    if !min_ok || frames == 0 {
        return Err(crate::tensor::TensorError::SequenceTooShort { len: frames, kernel: c.kernel, padding: c.padding }.into());
    }
    let mut valid = mask.to_vec();
    let mut len = frames;
    let feats = if c.n_layers == 0 {
        tape.constant(vec![batch, frames, dim], poses.to_vec())?
    } else {
        let mut cf = vec![0.0; poses.len()];
        for b in 0..batch {
            for t in 0..frames {
                for k in 0..dim {
                    cf[(b * dim + k) * frames + t] = poses[(b * frames + t) * dim + k];
                }
            }
        }
        let mut x = tape.constant(vec![batch, dim, frames], cf)?;
        for i in 0..c.n_layers {
            x = tape.conv1d(x, bound.var(&format!("comp.{i}.w")), bound.var(&format!("comp.{i}.b")), c.stride, c.padding)?;
            let (m, out) = downsample_mask(&valid, batch, len, c.kernel, c.stride, c.padding).expect("length checked above");
            valid = m;
            len = out;
            x = tape.gelu(x);
            let mut keep = Vec::with_capacity(batch * c.channels * len);
            for b in 0..batch {
                for _ in 0..c.channels {
                    keep.extend(valid[b * len..(b + 1) * len].iter().map(|&v| if v { 1.0 } else { 0.0 }));
                }
            }
            x = tape.mul_const(x, keep)?;
            x = dropout(tape, x, cfg.dropout_p, mode)?;
        }
        tape.transpose(x)?
    };
    if len > cfg.max_prefix_len {
        return Err(ModelError::Capacity { what: "compressed prefix", len, max: cfg.max_prefix_len });
    }
    let x = tape.matmul(feats, bound.var("proj.w"))?;
    let x = tape.add_broadcast(x, bound.var("proj.b"))?;
    let ids: Vec<usize> = (0..len).collect();
    let pos = tape.embedding(bound.var("prefix_pos"), &ids)?;
    let x = tape.add_broadcast(x, pos)?;
    Ok(Prefix { x, valid, batch, len })
}

/// Pre-norm transformer blocks followed by the final layer norm.
/// `x` is `[B, S, d]`, `allowed` is `[B, S, S]`.
pub fn run_blocks(tape: &mut Tape, bound: &Bound, x: Var, allowed: &[bool], mode: &mut Mode) -> Result<Var> {
    let cfg = bound.config();
    let mut x = dropout(tape, x, cfg.dropout_p, mode)?;
    for l in 0..cfg.n_layers {
        let v = |s: &str| bound.var(&format!("blocks.{l}.{s}"));
        let h = tape.layer_norm(x, v("ln1.g"), v("ln1.b"), LN_EPS)?;
        let qkv = tape.matmul(h, v("attn.qkv.w"))?;
        let qkv = tape.add_broadcast(qkv, v("attn.qkv.b"))?;
        let a = tape.attention(qkv, cfg.n_heads, allowed)?;
        let a = tape.matmul(a, v("attn.out.w"))?;
        let a = tape.add_broadcast(a, v("attn.out.b"))?;
        let a = dropout(tape, a, cfg.dropout_p, mode)?;
        x = tape.add(x, a)?;

        let h = tape.layer_norm(x, v("ln2.g"), v("ln2.b"), LN_EPS)?;
        let f = tape.matmul(h, v("ffn.w1"))?;
        let f = tape.add_broadcast(f, v("ffn.b1"))?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, v("ffn.w2"))?;
        let f = tape.add_broadcast(f, v("ffn.b2"))?;
        let f = dropout(tape, f, cfg.dropout_p, mode)?;
        x = tape.add(x, f)?;
    }
    Ok(tape.layer_norm(x, bound.var("ln_f.g"), bound.var("ln_f.b"), LN_EPS)?)
}

fn require_kind(bound: &Bound, kind: ModelKind) -> Result<()> {
    if bound.config().kind != kind {
        return Err(ModelError::Config(format!("operation needs a {kind} model, got {}", bound.config().kind)));
    }
    Ok(())
}

/// Text logits after the prefix: embeds `tokens` (`B × L`), runs the blocks
/// over prefix‖text and applies the head at text positions. Returns `[B, L, V]`.
fn text_logits(tape: &mut Tape, bound: &Bound, prefix: &Prefix, tokens: &[usize], token_valid: &[bool], mode: &mut Mode) -> Result<Var> {
    let cfg = bound.config();
    let b = prefix.batch;
    let l = tokens.len() / b;
    if l > cfg.max_text_len {
        return Err(ModelError::Capacity { what: "text", len: l, max: cfg.max_text_len });
    }
    let d = cfg.d_model;
    let emb = tape.embedding(bound.var("tok_emb"), tokens)?;
    let emb = tape.reshape(emb, vec![b, l, d])?;
    let pos_ids: Vec<usize> = (0..l).collect();
    let pos = tape.embedding(bound.var("text_pos"), &pos_ids)?;
    let text = tape.add_broadcast(emb, pos)?;
    let x = tape.concat1(prefix.x, text)?;

    let s = prefix.len + l;
    let mut valid = Vec::with_capacity(b * s);
    for i in 0..b {
        valid.extend_from_slice(&prefix.valid[i * prefix.len..(i + 1) * prefix.len]);
        valid.extend_from_slice(&token_valid[i * l..(i + 1) * l]);
    }
    let allowed = combine_masks(&build_causal_mask(prefix.len, l), &valid, b, s);
    let h = run_blocks(tape, bound, x, &allowed, mode)?;
    let h = tape.slice1(h, prefix.len, l)?;
    let logits = tape.matmul(h, bound.var("head.w"))?;
    Ok(tape.add_broadcast(logits, bound.var("head.b"))?)
}

fn check_batch(bound: &Bound, batch: &Batch) -> Result<()> {
    let dim = bound.config().input_dim;
    if batch.frame_width() != dim {
        return Err(ModelError::Config(format!("batch frame width {} does not match input_dim {dim}", batch.frame_width())));
    }
    Ok(())
}

/// Logits `[B, L_max + 1, V]` for every text position of `batch`.
pub fn forward_teacher_forced(tape: &mut Tape, bound: &Bound, batch: &Batch, mode: &mut Mode) -> Result<Var> {
    require_kind(bound, ModelKind::Autoregressive)?;
    check_batch(bound, batch)?;
    let prefix = encode_prefix(tape, bound, &batch.poses, &batch.pose_mask, batch.size, batch.max_frames, mode)?;
    text_logits(tape, bound, &prefix, &batch.tokens_in, &batch.token_mask, mode)
}

/// Mean next-token cross-entropy over non-padded text positions.
pub fn teacher_forced_loss(tape: &mut Tape, bound: &Bound, batch: &Batch, mode: &mut Mode) -> Result<Var> {
    let logits = forward_teacher_forced(tape, bound, batch, mode)?;
    Ok(tape.masked_cross_entropy(logits, &batch.tokens_out, PAD)?)
}

/// Next-token log-probabilities after `tokens` for a single-sample prefix.
/// Nodes created here are discarded before returning.
pub fn next_token_log_probs(tape: &mut Tape, bound: &Bound, prefix: &Prefix, tokens: &[usize]) -> Result<Vec<f64>> {
    let mark = tape.mark();
    let valid = vec![true; tokens.len()];
    let out = text_logits(tape, bound, prefix, tokens, &valid, &mut Mode::Eval).and_then(|logits| {
        let last = tape.slice1(logits, tokens.len() - 1, 1)?;
        let lp = tape.log_softmax(last)?;
        Ok(tape.data(lp).to_vec())
    });
    tape.truncate(mark);
    out
}

fn single_prefix<'p>(tape: &mut Tape, params: &'p ModelParams, pose: &PoseSequence) -> Result<(Bound<'p>, Prefix)> {
    let bound = params.bind(tape, false);
    require_kind(&bound, ModelKind::Autoregressive)?;
    let dim = bound.config().input_dim;
    if pose.joints() * 2 != dim {
        return Err(ModelError::Config(format!("pose has {} features per frame, model expects {dim}", pose.joints() * 2)));
    }
    let mask = vec![true; pose.n_frames()];
    let prefix = encode_prefix(tape, &bound, pose.frames(), &mask, 1, pose.n_frames(), &mut Mode::Eval)?;
    Ok((bound, prefix))
}

fn search(params: &ModelParams, pose: &PoseSequence, max_len: usize, beam: Option<usize>) -> Result<Hypothesis> {
    let mut tape = Tape::new();
    let (bound, prefix) = single_prefix(&mut tape, params, pose)?;
    let max_len = max_len.min(params.config().max_text_len);
    let next = |toks: &[usize]| next_token_log_probs(&mut tape, &bound, &prefix, toks);
    match beam {
        None => greedy_search(max_len, next),
        Some(k) => beam_search(k, max_len, next),
    }
}

/// Greedy decoding of one pose sequence (already modality-selected and normalized).
pub fn generate_greedy(params: &ModelParams, pose: &PoseSequence, max_len: usize) -> Result<(GlossSequence, Hypothesis)> {
    let h = search(params, pose, max_len, None)?;
    Ok((GlossSequence::new(h.tokens.clone())?, h))
}

/// Beam-search decoding of one pose sequence.
pub fn generate_beam(params: &ModelParams, pose: &PoseSequence, beam_size: usize, max_len: usize) -> Result<(GlossSequence, Hypothesis)> {
    let h = search(params, pose, max_len, Some(beam_size))?;
    Ok((GlossSequence::new(h.tokens.clone())?, h))
}

/// Mean cross-entropy of `glosses` followed by EOS, accumulated one token at
/// a time from ground-truth prefixes.
pub fn step_by_step_loss(params: &ModelParams, pose: &PoseSequence, glosses: &GlossSequence) -> Result<f64> {
    let mut tape = Tape::new();
    let (bound, prefix) = single_prefix(&mut tape, params, pose)?;
    let mut prefix_toks = vec![BOS];
    let mut total = 0.0;
    for &target in glosses.ids().iter().chain(std::iter::once(&EOS)) {
        let lp = next_token_log_probs(&mut tape, &bound, &prefix, &prefix_toks)?;
        total -= lp[target];
        prefix_toks.push(target);
    }
    Ok(total / (glosses.len() + 1) as f64)
}

/// Convenience: teacher-forced loss of a single example in evaluation mode.
pub fn single_example_loss(params: &ModelParams, pose: &PoseSequence, glosses: &GlossSequence) -> Result<f64> {
    let batch = pad_and_mask(&[(pose, glosses)])?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let loss = teacher_forced_loss(&mut tape, &bound, &batch, &mut Mode::Eval)?;
    Ok(tape.data(loss)[0])
}
