use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::pose::{pad_and_mask, GlossSequence, KeypointLayout, Modality, PoseSequence, Vocabulary};

fn tiny(kind: ModelKind, layers: usize) -> ModelConfig {
    ModelConfig {
        kind,
        input_dim: Modality::HandsOnly.feature_dim(),
        compressor: CompressorConfig { n_layers: layers, channels: 6, ..Default::default() },
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_mult: 2,
        dropout_p: 0.1,
        max_prefix_len: 300,
        max_text_len: 12,
        vocab_size: 9,
    }
}

fn random_pose(rng: &mut impl Rng, frames: usize) -> PoseSequence {
    let layout = KeypointLayout::from_parts(Modality::HandsOnly.parts());
    let n = frames * layout.joints() * 2;
    PoseSequence::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), frames, layout).unwrap()
}

fn random_glosses(rng: &mut impl Rng, len: usize, vocab: usize) -> GlossSequence {
    GlossSequence::new((0..len).map(|_| rng.gen_range(4..vocab)).collect()).unwrap()
}

/// Perturbs every parameter so zero-initialized biases and unit gains do not
/// hide bugs.
fn jiggle(p: &mut ModelParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
}

fn logits_of(params: &ModelParams, batch: &crate::pose::Batch) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let l = forward_teacher_forced(&mut tape, &bound, batch, &mut Mode::Eval).unwrap();
    tape.data(l).to_vec()
}

#[test]
fn init_is_deterministic_and_bounded() {
    let cfg = ModelConfig { input_dim: 134, vocab_size: 24, ..Default::default() };
    let a = ModelParams::init(&cfg, 7).unwrap();
    let b = ModelParams::init(&cfg, 7).unwrap();
    let c = ModelParams::init(&cfg, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for (name, t) in a.names().iter().zip(a.tensors()) {
        if name.ends_with(".g") {
            assert!(t.data().iter().all(|&v| v == 1.0));
        } else {
            assert!(t.data().iter().all(|v| v.is_finite() && v.abs() < 1.0), "{name}");
        }
    }
    assert!(a.tensors().iter().all(|t| t.requires_grad()));
}

#[test]
fn parameter_count_closed_form() {
    let cfg = ModelConfig { input_dim: 134, vocab_size: 24, ..Default::default() };
    let (j2, c, d, l, f, v, p, t) = (134, 512, 128, 4, 512, 24, 512, 32);
    let comp = (c * j2 * 3 + c) + (c * c * 3 + c);
    let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
    let expected = comp + (c * d + d) + p * d + v * d + t * d + l * block + 2 * d + (d * v + v);
    assert_eq!(ModelParams::init(&cfg, 0).unwrap().count(), expected);

    let ctc = ModelConfig { kind: ModelKind::Ctc, ..cfg };
    let expected_ctc = comp + (c * d + d) + p * d + l * block + 2 * d + (d * (v + 1) + v + 1);
    assert_eq!(ModelParams::init(&ctc, 0).unwrap().count(), expected_ctc);
}

#[test]
fn invalid_configs_are_rejected() {
    let base = tiny(ModelKind::Autoregressive, 2);
    assert!(ModelParams::init(&ModelConfig { n_heads: 3, ..base.clone() }, 0).is_err());
    assert!(ModelParams::init(&ModelConfig { d_model: 0, ..base.clone() }, 0).is_err());
    assert!(ModelParams::init(&ModelConfig { dropout_p: 1.0, ..base.clone() }, 0).is_err());
    assert!(ModelParams::init(&ModelConfig { vocab_size: 4, ..base }, 0).is_err());
}

#[test]
fn config_kv_round_trip() {
    let cfg = tiny(ModelKind::Ctc, 3);
    let kv: HashMap<String, String> = cfg.to_kv().into_iter().collect();
    assert_eq!(ModelConfig::from_kv(&kv).unwrap(), cfg);
}

fn prefix_len(frames: usize, layers: usize) -> usize {
    let mut cfg = tiny(ModelKind::Autoregressive, layers);
    cfg.input_dim = 2;
    cfg.max_prefix_len = 1000;
    let params = ModelParams::init(&cfg, 1).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let poses = vec![0.5; frames * 2];
    let p = encode_prefix(&mut tape, &bound, &poses, &vec![true; frames], 1, frames, &mut Mode::Eval).unwrap();
    assert_eq!(tape.shape(p.x), [1, p.len, 8]);
    p.len
}

#[test]
fn compression_lengths() {
    assert_eq!(prefix_len(1000, 2), 250);
    assert_eq!(prefix_len(8, 2), 2);
    assert_eq!(prefix_len(8, 0), 8);
    assert_eq!(prefix_len(9, 3), 2);
    assert_eq!(CompressorConfig::default().out_len(1000), Some(250));
}

#[test]
fn prefix_beyond_capacity_is_an_error() {
    let mut cfg = tiny(ModelKind::Autoregressive, 0);
    cfg.input_dim = 2;
    cfg.max_prefix_len = 4;
    let params = ModelParams::init(&cfg, 1).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let r = encode_prefix(&mut tape, &bound, &[0.0; 10], &[true; 5], 1, 5, &mut Mode::Eval);
    assert!(matches!(r, Err(ModelError::Capacity { len: 5, max: 4, .. })));
}

#[test]
fn zero_poses_give_bias_path_plus_positions() {
    let mut cfg = tiny(ModelKind::Autoregressive, 1);
    cfg.input_dim = 3;
    let mut params = ModelParams::init(&cfg, 3).unwrap();
    jiggle(&mut params, 4);
    let frames = 6;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let p = encode_prefix(&mut tape, &bound, &vec![0.0; frames * 3], &vec![true; frames], 1, frames, &mut Mode::Eval).unwrap();
    let got = tape.data(p.x).to_vec();

    let gelu = |v: f64| 0.5 * v * (1.0 + (0.797_884_560_802_865_4 * (v + 0.044_715 * v * v * v)).tanh());
    let bconv = params.get("comp.0.b").unwrap().data();
    let w = params.get("proj.w").unwrap().data();
    let pb = params.get("proj.b").unwrap().data();
    let pos = params.get("prefix_pos").unwrap().data();
    let h: Vec<f64> = bconv.iter().map(|&b| gelu(b)).collect();
    for t in 0..p.len {
        for j in 0..8 {
            let lin: f64 = (0..6).map(|c| h[c] * w[c * 8 + j]).sum();
            let want = lin + pb[j] + pos[t * 8 + j];
            assert!((got[t * 8 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn causal_mask_examples() {
    assert_eq!(build_causal_mask(0, 3), vec![true, false, false, true, true, false, true, true, true]);
    let m = build_causal_mask(2, 1);
    assert_eq!(&m[6..9], &[true, true, true]);
    let valid = [true, false, true];
    let c = combine_masks(&build_causal_mask(0, 3), &valid, 1, 3);
    for i in 0..3 {
        assert!(!c[i * 3 + 1]);
    }
}

#[test]
fn downsampled_mask_uses_kernel_centre() {
    let valid = [true, true, true, true, true, false, false, false];
    let (m, len) = downsample_mask(&valid, 1, 8, 3, 2, 1).unwrap();
    assert_eq!(len, 4);
    assert_eq!(m, vec![true, true, true, false]);
}

#[test]
fn logits_shape_and_causality() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = tiny(ModelKind::Autoregressive, 2);
    let mut params = ModelParams::init(&cfg, 5).unwrap();
    jiggle(&mut params, 6);
    let poses = [random_pose(&mut rng, 9), random_pose(&mut rng, 14)];
    let gl = [random_glosses(&mut rng, 3, 9), random_glosses(&mut rng, 5, 9)];
    let batch = pad_and_mask(&[(&poses[0], &gl[0]), (&poses[1], &gl[1])]).unwrap();
    let base = logits_of(&params, &batch);
    assert_eq!(base.len(), 2 * 6 * 9);
    for t in 1..6 {
        let mut b2 = batch.clone();
        b2.tokens_in[6 + t] = 4 + (b2.tokens_in[6 + t] - 3) % 5;
        let pert = logits_of(&params, &b2);
        let row = |v: &[f64], p: usize| v[(6 + p) * 9..(6 + p + 1) * 9].to_vec();
        for p in 0..t {
            assert_eq!(row(&base, p), row(&pert, p), "position {p} changed after perturbing {t}");
        }
        assert_ne!(row(&base, t), row(&pert, t));
    }
}

#[test]
fn padding_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = tiny(ModelKind::Autoregressive, 2);
    let mut params = ModelParams::init(&cfg, 9).unwrap();
    jiggle(&mut params, 10);
    let pose = random_pose(&mut rng, 11);
    let gl = random_glosses(&mut rng, 3, 9);
    let alone = logits_of(&params, &pad_and_mask(&[(&pose, &gl)]).unwrap());
    // a longer companion forces extra pose frames and extra token padding
    let long = random_pose(&mut rng, 23);
    let long_gl = random_glosses(&mut rng, 7, 9);
    let batch = pad_and_mask(&[(&pose, &gl), (&long, &long_gl)]).unwrap();
    let padded = logits_of(&params, &batch);
    for p in 0..4 {
        for v in 0..9 {
            assert!((alone[p * 9 + v] - padded[p * 9 + v]).abs() <= 1e-9);
        }
    }
}

#[test]
fn teacher_forcing_matches_step_by_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for layers in [0, 1, 2] {
        let cfg = tiny(ModelKind::Autoregressive, layers);
        let mut params = ModelParams::init(&cfg, 21).unwrap();
        jiggle(&mut params, 22);
        let pose = random_pose(&mut rng, 10);
        let gl = random_glosses(&mut rng, 4, 9);
        let tf = single_example_loss(&params, &pose, &gl).unwrap();
        let sbs = step_by_step_loss(&params, &pose, &gl).unwrap();
        assert!((tf - sbs).abs() <= 1e-9, "{tf} vs {sbs}");
    }
}

#[test]
fn dropout_only_in_training_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = tiny(ModelKind::Autoregressive, 2);
    let params = ModelParams::init(&cfg, 1).unwrap();
    let pose = random_pose(&mut rng, 10);
    let gl = random_glosses(&mut rng, 2, 9);
    let batch = pad_and_mask(&[(&pose, &gl)]).unwrap();
    let run = |mode: &mut Mode| {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let loss = teacher_forced_loss(&mut tape, &bound, &batch, mode).unwrap();
        tape.data(loss)[0]
    };
    assert_eq!(run(&mut Mode::Eval), run(&mut Mode::Eval));
    let mut r1 = RngStream::keyed(1, &[2]);
    let mut r2 = RngStream::keyed(1, &[2]);
    let a = run(&mut Mode::Train(&mut r1));
    assert_eq!(a, run(&mut Mode::Train(&mut r2)));
    assert_ne!(a, run(&mut Mode::Eval));
}

#[test]
fn text_beyond_capacity_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = tiny(ModelKind::Autoregressive, 2);
    let params = ModelParams::init(&cfg, 1).unwrap();
    let pose = random_pose(&mut rng, 10);
    let gl = random_glosses(&mut rng, 12, 9);
    let batch = pad_and_mask(&[(&pose, &gl)]).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    assert!(matches!(forward_teacher_forced(&mut tape, &bound, &batch, &mut Mode::Eval), Err(ModelError::Capacity { .. })));
}

#[test]
fn beam_of_one_is_greedy_and_beam_dominates() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for seed in 0..12 {
        let cfg = tiny(ModelKind::Autoregressive, 1);
        let mut params = ModelParams::init(&cfg, seed).unwrap();
        jiggle(&mut params, 100 + seed);
        let pose = random_pose(&mut rng, 7);
        let (g, gh) = generate_greedy(&params, &pose, 6).unwrap();
        let (b1, _) = generate_beam(&params, &pose, 1, 6).unwrap();
        assert_eq!(g, b1);
        assert!(g.len() <= 6);
        let (_, bh) = generate_beam(&params, &pose, 3, 6).unwrap();
        assert!(bh.score() >= gh.score());
        let (_, again) = generate_beam(&params, &pose, 3, 6).unwrap();
        assert_eq!(bh, again);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = tiny(ModelKind::Autoregressive, 2);
    let mut params = ModelParams::init(&cfg, 31).unwrap();
    jiggle(&mut params, 32);
    params.tensors_mut()[0].data_mut()[0] = -0.0;
    let vocab = Vocabulary::from_tokens(["A", "B", "C", "D", "E"].map(String::from));
    let ck = Checkpoint { params, modality: Modality::HandsOnly, vocab };
    let bytes = write_checkpoint(&ck);
    let back = read_checkpoint(&bytes).unwrap();
    assert_eq!(write_checkpoint(&back), bytes);
    for (a, b) in ck.params.tensors().iter().zip(back.params.tensors()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(back.vocab, ck.vocab);
    assert_eq!(back.modality, Modality::HandsOnly);

    assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(read_checkpoint(&extra).is_err());
}

#[test]
fn load_matching_copies_named_arrays() {
    let cfg = tiny(ModelKind::Autoregressive, 2);
    let a = ModelParams::init(&cfg, 1).unwrap();
    let mut b = ModelParams::init(&ModelConfig { compressor: CompressorConfig { n_layers: 1, ..cfg.compressor }, ..cfg }, 2).unwrap();
    let copied = b.load_matching(&a);
    assert_eq!(copied, b.tensors().len());
    let c = ModelParams::init(&ModelConfig { d_model: 4, ..cfg }, 2).unwrap();
    let mut d = a.clone();
    // compressor arrays and the head bias do not depend on d_model
    assert_eq!(d.load_matching(&c), 5);
    assert_eq!(a.get("blocks.1.ffn.w2"), b.get("blocks.1.ffn.w2"));
}
