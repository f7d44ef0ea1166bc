//! Teacher-forced training with AdamW, warm-restart cosine schedule, early
//! stopping on dev WER and checkpointing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::augment::{apply_pipeline, AugConfig};
use crate::ctc::{ctc_batch_loss, ctc_decode};
use crate::metrics::{score, DecodedPair, MetricsError};
use crate::model::{
    generate_beam, generate_greedy, load_checkpoint, save_checkpoint, teacher_forced_loss, Checkpoint, Mode, ModelConfig, ModelError,
    ModelKind, ModelParams,
};
use crate::pose::{
    normalize_sequence, pad_and_mask, select_modality, DataError, Dataset, Example, GlossSequence, Modality, PoseSequence, Split,
    Vocabulary,
};
use crate::rng::{hash_str, RngStream};
use crate::tensor::{adamw_step, cosine_warm_restart_lr, AdamWConfig, AdamWState, Tape};

pub const HISTORY_FILE: &str = "history.tsv";
pub const HISTORY_HEADER: &str = "epoch\tlr\ttrain_loss\tdev_wer";
pub const BEST_CHECKPOINT: &str = "ckpt_best";
pub const LAST_CHECKPOINT: &str = "ckpt_last";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerConfig {
    pub enabled: bool,
    pub t0: usize,
    pub t_mult: usize,
    pub lr_min: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { enabled: true, t0: 10, t_mult: 2, lr_min: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size_train: usize,
    pub batch_size_eval: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub scheduler: SchedulerConfig,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub augment: AugConfig,
    pub modality: Modality,
    pub max_decode_len: usize,
    pub beam_size: usize,
    /// Stop after the epoch during which this many seconds have elapsed.
    pub time_budget_secs: Option<f64>,
    /// Checkpoint whose matching arrays replace the random initialization.
    pub init_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size_train: 8,
            batch_size_eval: 4,
            lr: 1e-4,
            weight_decay: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            scheduler: SchedulerConfig::default(),
            early_stop_patience: 10,
            seed: 0,
            augment: AugConfig::default(),
            modality: Modality::BodyHands,
            max_decode_len: 32,
            beam_size: 1,
            time_budget_secs: None,
            init_from: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 || self.batch_size_train == 0 || self.batch_size_eval == 0 {
            return err("epochs and batch sizes must be positive");
        }
        if self.early_stop_patience == 0 {
            return err("early-stop patience must be at least 1");
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return err("lr and weight decay must be non-negative and eps positive");
        }
        if !((0.0..1.0).contains(&self.betas.0) && (0.0..1.0).contains(&self.betas.1)) {
            return err("betas must lie in [0, 1)");
        }
        let s = &self.scheduler;
        if s.enabled && (s.t0 == 0 || s.t_mult == 0 || !(s.lr_min >= 0.0)) {
            return err("scheduler needs t0 >= 1, t_mult >= 1 and lr_min >= 0");
        }
        if self.max_decode_len == 0 || self.beam_size == 0 {
            return err("max_decode_len and beam_size must be positive");
        }
        self.augment.validate().map_err(TrainError::Config)
    }

    /// Learning rate used throughout `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let s = &self.scheduler;
        if s.enabled {
            cosine_warm_restart_lr(epoch, self.lr, s.lr_min, s.t0, s.t_mult)
        } else {
            self.lr
        }
    }

    fn adamw(&self, lr: f64) -> AdamWConfig {
        AdamWConfig { lr, beta1: self.betas.0, beta2: self.betas.1, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// An example ready for the model: modality-selected, normalized, encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub sample_id: String,
    pub pose: PoseSequence,
    pub glosses: GlossSequence,
    pub reference: String,
}

/// Keypoint selection and normalization shared by training and evaluation.
pub fn prepare_pose(pose: &PoseSequence, modality: Modality) -> Result<PoseSequence> {
    Ok(normalize_sequence(&select_modality(pose, modality)?)?)
}

pub fn prepare(examples: &[Example], modality: Modality, vocab: &Vocabulary) -> Result<Vec<Prepared>> {
    examples
        .iter()
        .map(|e| {
            Ok(Prepared {
                sample_id: e.sample_id.clone(),
                pose: prepare_pose(&e.pose, modality)?,
                glosses: vocab.encode(&e.glosses)?,
                reference: e.glosses.clone(),
            })
        })
        .collect()
}

/// Loss of one batch on a fresh tape; returns the tape and loss node so the
/// caller can run backward.
fn batch_loss(params: &ModelParams, samples: &[(&PoseSequence, &GlossSequence)], mode: &mut Mode) -> Result<Option<(Tape, crate::tensor::Var, Vec<crate::tensor::Var>)>> {
    let batch = pad_and_mask(samples)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = match params.config().kind {
        ModelKind::Autoregressive => Some(teacher_forced_loss(&mut tape, &bound, &batch, mode)?),
        ModelKind::Ctc => {
            let targets: Vec<GlossSequence> = samples.iter().map(|(_, g)| (*g).clone()).collect();
            ctc_batch_loss(&mut tape, &bound, &batch, &targets, mode)?
        }
    };
    let vars = bound.vars().to_vec();
    Ok(loss.map(|l| (tape, l, vars)))
}

/// One pass over `data` in a seeded shuffled order. Returns the mean batch loss.
pub fn train_epoch(params: &mut ModelParams, opt: &mut AdamWState, data: &[Prepared], cfg: &TrainConfig, epoch: usize, lr: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(TrainError::Config("empty training split".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut RngStream::keyed(cfg.seed, &[hash_str("shuffle"), epoch as u64]));
    let adamw = cfg.adamw(lr);
    let mut total = 0.0;
    let mut counted = 0usize;
    for (bi, chunk) in order.chunks(cfg.batch_size_train).enumerate() {
        let poses: Vec<PoseSequence> = chunk
            .iter()
            .map(|&i| {
                let mut rng = RngStream::for_sample(cfg.seed, epoch as u64, &data[i].sample_id);
                apply_pipeline(&data[i].pose, &cfg.augment, &mut rng)
            })
            .collect();
        let samples: Vec<(&PoseSequence, &GlossSequence)> = chunk.iter().zip(&poses).map(|(&i, p)| (p, &data[i].glosses)).collect();
        let mut drop_rng = RngStream::keyed(cfg.seed, &[hash_str("dropout"), epoch as u64, bi as u64]);
        let Some((mut tape, loss, vars)) = batch_loss(params, &samples, &mut Mode::Train(&mut drop_rng))? else {
            continue;
        };
        let value = tape.data(loss)[0];
        if !value.is_finite() {
            return Err(TrainError::Divergence { epoch, batch: bi, loss: value });
        }
        tape.backward(loss).map_err(ModelError::from)?;
        let grads: Vec<Option<&[f64]>> = vars.iter().map(|&v| tape.grad(v)).collect();
        adamw_step(params.tensors_mut(), &grads, opt, &adamw);
        total += value;
        counted += 1;
    }
    if counted == 0 {
        return Err(TrainError::Config("no batch produced a usable loss".into()));
    }
    Ok(total / counted as f64)
}

/// Decodes one prepared pose sequence with the model's native decoder.
pub fn decode_pose(params: &ModelParams, pose: &PoseSequence, max_len: usize, beam: usize) -> Result<GlossSequence> {
    Ok(match params.config().kind {
        ModelKind::Autoregressive if beam > 1 => generate_beam(params, pose, beam, max_len)?.0,
        ModelKind::Autoregressive => generate_greedy(params, pose, max_len)?.0,
        ModelKind::Ctc => ctc_decode(params, pose)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Pooled corpus WER.
    pub wer: f64,
    pub sentence_wer: f64,
    pub decodes: Vec<DecodedPair>,
}

/// Decodes every sample (no augmentation, no dropout) and scores the corpus.
/// Samples are decoded one at a time, so the result does not depend on any
/// batch size.
pub fn evaluate(params: &ModelParams, data: &[Prepared], vocab: &Vocabulary, max_len: usize, beam: usize) -> Result<Evaluation> {
    let mut decodes = Vec::with_capacity(data.len());
    for p in data {
        let hyp = decode_pose(params, &p.pose, max_len, beam)?;
        decodes.push(DecodedPair::new(p.sample_id.clone(), &p.reference, &vocab.decode(&hyp)));
    }
    let (wer, sentence_wer) = score(&decodes)?;
    Ok(Evaluation { wer, sentence_wer, decodes })
}

/// Early-stopping bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub epoch: usize,
    pub best_dev_wer: f64,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
}

impl Default for RunState {
    fn default() -> Self {
        RunState { epoch: 0, best_dev_wer: f64::INFINITY, best_epoch: None, epochs_since_improvement: 0 }
    }
}

impl RunState {
    /// Records the dev WER of `epoch`; returns whether it strictly improved.
    pub fn record(&mut self, epoch: usize, dev_wer: f64) -> bool {
        self.epoch = epoch;
        if dev_wer < self.best_dev_wer {
            self.best_dev_wer = dev_wer;
            self.best_epoch = Some(epoch);
            self.epochs_since_improvement = 0;
            true
        } else {
            self.epochs_since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self, patience: usize) -> bool {
        self.epochs_since_improvement >= patience
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_wer: f64,
}

pub fn history_tsv(rows: &[HistoryRow]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in rows {
        writeln!(out, "{}\t{}\t{}\t{}", r.epoch, r.lr, r.train_loss, r.dev_wer).unwrap();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EpochLimit,
    EarlyStop,
    TimeBudget,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub history: Vec<HistoryRow>,
    pub state: RunState,
    pub stop: StopReason,
    pub vocab: Vocabulary,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

/// Loads the train and dev splits, builds the vocabulary from the training
/// glosses and prepares both splits.
pub fn load_training_data(data_root: &Path, modality: Modality) -> Result<(Vocabulary, Vec<Prepared>, Vec<Prepared>)> {
    let ds = Dataset::open(data_root)?;
    let train = ds.load_split(Split::Train)?;
    let dev = ds.load_split(Split::Dev)?;
    if train.is_empty() || dev.is_empty() {
        return Err(TrainError::Config("train and dev splits must be non-empty".into()));
    }
    let vocab = Vocabulary::build(train.iter().map(|e| e.glosses.as_str()));
    Ok((vocab.clone(), prepare(&train, modality, &vocab)?, prepare(&dev, modality, &vocab)?))
}

/// Full training run. `model` supplies the architecture; its input width and
/// vocabulary size are taken from the modality and the training split.
pub fn run_training(cfg: &TrainConfig, model: &ModelConfig, data_root: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (vocab, train, dev) = load_training_data(data_root, cfg.modality)?;
    let model_cfg = ModelConfig { input_dim: cfg.modality.feature_dim(), vocab_size: vocab.len(), ..model.clone() };
    let mut params = ModelParams::init(&model_cfg, cfg.seed)?;
    if let Some(path) = &cfg.init_from {
        let ext = load_checkpoint(path)?;
        let n = params.load_matching(&ext.params);
        log::info!("initialized {n} arrays from {}", path.display());
    }
    fs::create_dir_all(out_dir).map_err(|source| TrainError::Io { path: out_dir.to_path_buf(), source })?;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let history_path = out_dir.join(HISTORY_FILE);

    let mut opt = AdamWState::new(params.tensors());
    let mut state = RunState::default();
    let mut history = Vec::new();
    let mut stop = StopReason::EpochLimit;
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let t_train = Instant::now();
        let train_loss = train_epoch(&mut params, &mut opt, &train, cfg, epoch, lr)?;
        let t_eval = Instant::now();
        let eval = evaluate(&params, &dev, &vocab, cfg.max_decode_len, cfg.beam_size)?;
        history.push(HistoryRow { epoch, lr, train_loss, dev_wer: eval.wer });
        log::info!(
            "epoch {epoch}: lr {lr:.3e} loss {train_loss:.5} dev_wer {:.4} (train {:.1}s, eval {:.1}s)",
            eval.wer,
            (t_eval - t_train).as_secs_f64(),
            t_eval.elapsed().as_secs_f64()
        );
        let ck = Checkpoint { params: params.clone(), modality: cfg.modality, vocab: vocab.clone() };
        if state.record(epoch, eval.wer) {
            save_checkpoint(&ck, &best_path)?;
        }
        save_checkpoint(&ck, &last_path)?;
        write_file(&history_path, history_tsv(&history))?;
        if state.should_stop(cfg.early_stop_patience) {
            stop = StopReason::EarlyStop;
            break;
        }
        if cfg.time_budget_secs.is_some_and(|b| start.elapsed().as_secs_f64() >= b) {
            stop = StopReason::TimeBudget;
            break;
        }
    }
    Ok(TrainOutcome { best_checkpoint: best_path, last_checkpoint: last_path, history, state, stop, vocab })
}

/// Loads `split` of the dataset at `data_root` and evaluates `ck` on it.
pub fn evaluate_checkpoint(ck: &Checkpoint, data_root: &Path, split: Split, max_len: usize, beam: usize) -> Result<Evaluation> {
    let ds = Dataset::open(data_root)?;
    let examples = ds.load_split(split)?;
    let data = prepare(&examples, ck.modality, &ck.vocab)?;
    evaluate(&ck.params, &data, &ck.vocab, max_len, beam)
}
