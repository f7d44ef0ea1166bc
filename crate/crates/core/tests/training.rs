use std::fs;
use std::path::Path;

use autosign::model::{load_checkpoint, save_checkpoint, CompressorConfig, ModelConfig, ModelKind, ModelParams};
use autosign::pose::synth::{synth_generate, SynthConfig};
use autosign::pose::Split;
use autosign::tensor::AdamWState;
use autosign::training::*;

fn tiny_data(dir: &Path) {
    let cfg = SynthConfig {
        vocab_size: 5,
        n_samples: 24,
        sentence_len: (2, 3),
        frames_per_gloss: (6, 8),
        n_signers: 4,
        heldout_signers: 1,
        noise_sigma: 1.0,
    };
    synth_generate(&cfg, 5, dir).unwrap();
}

fn tiny_model(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        compressor: CompressorConfig { n_layers: 1, channels: 16, ..Default::default() },
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        ffn_mult: 2,
        ..Default::default()
    }
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, lr: 3e-3, max_decode_len: 6, ..Default::default() }
}

#[test]
fn two_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    for kind in [ModelKind::Autoregressive, ModelKind::Ctc] {
        let a = dir.path().join(format!("{kind}_a"));
        let b = dir.path().join(format!("{kind}_b"));
        run_training(&tiny_train(3), &tiny_model(kind), dir.path(), &a).unwrap();
        run_training(&tiny_train(3), &tiny_model(kind), dir.path(), &b).unwrap();
        for f in [HISTORY_FILE, BEST_CHECKPOINT, LAST_CHECKPOINT] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{kind} {f}");
        }
        let history = fs::read_to_string(a.join(HISTORY_FILE)).unwrap();
        let lines: Vec<&str> = history.lines().collect();
        assert_eq!(lines[0], HISTORY_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0\t"));
    }
}

#[test]
fn seed_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_training(&tiny_train(1), &tiny_model(ModelKind::Autoregressive), dir.path(), &a).unwrap();
    run_training(&TrainConfig { seed: 1, ..tiny_train(1) }, &tiny_model(ModelKind::Autoregressive), dir.path(), &b).unwrap();
    assert_ne!(fs::read(a.join(LAST_CHECKPOINT)).unwrap(), fs::read(b.join(LAST_CHECKPOINT)).unwrap());
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let (vocab, train, _) = load_training_data(dir.path(), autosign::pose::Modality::BodyHands).unwrap();
    let cfg = ModelConfig { input_dim: 134, vocab_size: vocab.len(), ..tiny_model(ModelKind::Autoregressive) };
    let mut params = ModelParams::init(&cfg, 0).unwrap();
    let before = params.clone();
    let mut opt = AdamWState::new(params.tensors());
    let loss = train_epoch(&mut params, &mut opt, &train, &tiny_train(1), 0, 0.0).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert_eq!(params, before);
    let loss = train_epoch(&mut params, &mut opt, &train, &tiny_train(1), 1, 1e-3).unwrap();
    assert!(loss.is_finite());
    assert_ne!(params, before);
}

#[test]
fn patience_stops_early_and_best_checkpoint_matches_history() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let cfg = TrainConfig { early_stop_patience: 1, lr: 0.0, ..tiny_train(20) };
    let out = run_training(&cfg, &tiny_model(ModelKind::Autoregressive), dir.path(), &dir.path().join("run")).unwrap();
    assert_eq!(out.stop, StopReason::EarlyStop);
    assert_eq!(out.history.len(), 2);
    assert_eq!(out.state.best_epoch, Some(0));
    let ck = load_checkpoint(&out.best_checkpoint).unwrap();
    let dev = evaluate_checkpoint(&ck, dir.path(), Split::Dev, cfg.max_decode_len, 1).unwrap();
    assert_eq!(dev.wer, out.history[0].dev_wer);
}

#[test]
fn time_budget_stops_after_first_epoch() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let cfg = TrainConfig { time_budget_secs: Some(0.0), ..tiny_train(5) };
    let out = run_training(&cfg, &tiny_model(ModelKind::Ctc), dir.path(), &dir.path().join("run")).unwrap();
    assert_eq!(out.stop, StopReason::TimeBudget);
    assert_eq!(out.history.len(), 1);
}

#[test]
fn non_finite_weights_report_divergence() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let first = dir.path().join("first");
    let out = run_training(&tiny_train(1), &tiny_model(ModelKind::Autoregressive), dir.path(), &first).unwrap();
    let mut ck = load_checkpoint(&out.last_checkpoint).unwrap();
    let head = ck.params.names().iter().position(|n| n == "head.b").unwrap();
    ck.params.tensors_mut()[head].data_mut()[0] = f64::NAN;
    let poisoned = dir.path().join("poisoned");
    save_checkpoint(&ck, &poisoned).unwrap();
    let cfg = TrainConfig { init_from: Some(poisoned), ..tiny_train(1) };
    let err = run_training(&cfg, &tiny_model(ModelKind::Autoregressive), dir.path(), &dir.path().join("second")).unwrap_err();
    assert!(matches!(err, TrainError::Divergence { epoch: 0, batch: 0, .. }), "{err}");
}

#[test]
fn eval_batch_size_does_not_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let a = run_training(&tiny_train(2), &tiny_model(ModelKind::Autoregressive), dir.path(), &dir.path().join("a")).unwrap();
    let cfg = TrainConfig { batch_size_eval: 1, ..tiny_train(2) };
    let b = run_training(&cfg, &tiny_model(ModelKind::Autoregressive), dir.path(), &dir.path().join("b")).unwrap();
    assert_eq!(a.history, b.history);
    let ck = load_checkpoint(&a.last_checkpoint).unwrap();
    let dev = evaluate_checkpoint(&ck, dir.path(), Split::Dev, 6, 1).unwrap();
    assert_eq!(dev.wer, a.history[1].dev_wer);
}

#[test]
fn beam_decoding_never_scores_below_greedy() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let out = run_training(&tiny_train(2), &tiny_model(ModelKind::Autoregressive), dir.path(), &dir.path().join("a")).unwrap();
    let ck = load_checkpoint(&out.last_checkpoint).unwrap();
    let dev = autosign::pose::Dataset::open(dir.path()).unwrap().load_split(Split::Dev).unwrap();
    for ex in &dev {
        let pose = prepare_pose(&ex.pose, ck.modality).unwrap();
        let (_, g) = autosign::model::generate_greedy(&ck.params, &pose, 6).unwrap();
        let (_, b) = autosign::model::generate_beam(&ck.params, &pose, 4, 6).unwrap();
        assert!(b.score() >= g.score() - 1e-12);
    }
}
