//! Run configuration files: flat `section.key = value` lines, `#` comments.
//!
//! Unknown and repeated keys are errors.

use std::collections::HashSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::model::ModelConfig;
use crate::pose::synth::SynthConfig;
use crate::training::TrainConfig;

pub const SEED_ENV: &str = "AUTOSIGN_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `section.key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("{key}: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value { key: key.into(), value: value.into() })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::Value { key: key.into(), value: value.into() }),
    }
}

fn kv(key: &'static str, v: impl Display) -> (&'static str, String) {
    (key, v.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if !key.contains('.') || value.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            if !seen.insert(key.to_owned()) {
                return Err(ConfigError::Duplicate { line, key: key.into() });
            }
            if !cfg.set(key, value)? {
                return Err(ConfigError::UnknownKey { line, key: key.into() });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    /// Applies `AUTOSIGN_SEED` when set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.set_seed(parse(SEED_ENV, v.trim())?);
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let model = ModelConfig { input_dim: self.train.modality.feature_dim(), ..self.model.clone() };
        model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let s = &self.synth;
        if s.sentence_len.0 > s.sentence_len.1 || s.frames_per_gloss.0 > s.frames_per_gloss.1 {
            return Err(ConfigError::Invalid("synth ranges must have min <= max".into()));
        }
        Ok(())
    }

    /// Sets one key. Returns `Ok(false)` for an unknown key.
    fn set(&mut self, key: &str, v: &str) -> Result<bool, ConfigError> {
        let (s, m, t) = (&mut self.synth, &mut self.model, &mut self.train);
        let a = &mut t.augment;
        match key {
            "run.seed" => {
                let seed = parse(key, v)?;
                self.set_seed(seed);
            }
            "data.root" => self.data_root = PathBuf::from(v),
            "data.out" => self.out_dir = PathBuf::from(v),
            "data.modality" => t.modality = v.parse().map_err(|_| ConfigError::Value { key: key.into(), value: v.into() })?,

            "synth.vocab_size" => s.vocab_size = parse(key, v)?,
            "synth.n_samples" => s.n_samples = parse(key, v)?,
            "synth.sentence_len_min" => s.sentence_len.0 = parse(key, v)?,
            "synth.sentence_len_max" => s.sentence_len.1 = parse(key, v)?,
            "synth.frames_per_gloss_min" => s.frames_per_gloss.0 = parse(key, v)?,
            "synth.frames_per_gloss_max" => s.frames_per_gloss.1 = parse(key, v)?,
            "synth.n_signers" => s.n_signers = parse(key, v)?,
            "synth.heldout_signers" => s.heldout_signers = parse(key, v)?,
            "synth.noise_sigma" => s.noise_sigma = parse(key, v)?,

            "model.kind" => m.kind = v.parse().map_err(|_| ConfigError::Value { key: key.into(), value: v.into() })?,
            "model.compressor_layers" => m.compressor.n_layers = parse(key, v)?,
            "model.channels" => m.compressor.channels = parse(key, v)?,
            "model.kernel" => m.compressor.kernel = parse(key, v)?,
            "model.stride" => m.compressor.stride = parse(key, v)?,
            "model.padding" => m.compressor.padding = parse(key, v)?,
            "model.d_model" => m.d_model = parse(key, v)?,
            "model.n_layers" => m.n_layers = parse(key, v)?,
            "model.n_heads" => m.n_heads = parse(key, v)?,
            "model.ffn_mult" => m.ffn_mult = parse(key, v)?,
            "model.dropout" => m.dropout_p = parse(key, v)?,
            "model.max_prefix_len" => m.max_prefix_len = parse(key, v)?,
            "model.max_text_len" => m.max_text_len = parse(key, v)?,
            "model.init_from" => t.init_from = Some(PathBuf::from(v)),

            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size_train = parse(key, v)?,
            "train.eval_batch_size" => t.batch_size_eval = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.beta1" => t.betas.0 = parse(key, v)?,
            "train.beta2" => t.betas.1 = parse(key, v)?,
            "train.eps" => t.eps = parse(key, v)?,
            "train.scheduler" => t.scheduler.enabled = parse_bool(key, v)?,
            "train.t0" => t.scheduler.t0 = parse(key, v)?,
            "train.t_mult" => t.scheduler.t_mult = parse(key, v)?,
            "train.lr_min" => t.scheduler.lr_min = parse(key, v)?,
            "train.patience" => t.early_stop_patience = parse(key, v)?,
            "train.max_decode_len" => t.max_decode_len = parse(key, v)?,
            "train.beam_size" => t.beam_size = parse(key, v)?,
            "train.time_budget_secs" => t.time_budget_secs = Some(parse(key, v)?),

            "augment.enabled" => a.enabled = parse_bool(key, v)?,
            "augment.jitter_sigma" => a.jitter_sigma = parse(key, v)?,
            "augment.scale_min" => a.scale_range.0 = parse(key, v)?,
            "augment.scale_max" => a.scale_range.1 = parse(key, v)?,
            "augment.temporal_mask_p" => a.temporal_mask_p = parse(key, v)?,
            "augment.frame_dropout_p" => a.frame_dropout_p = parse(key, v)?,
            "augment.time_warp_max_shift" => a.time_warp_max_shift = parse(key, v)?,
            "augment.per_aug_apply_p" => a.per_aug_apply_p = parse(key, v)?,
            "augment.part_aware" => a.part_aware.enabled = parse_bool(key, v)?,
            "augment.hand_rot_max_deg" => a.part_aware.hand_rot_max_deg = parse(key, v)?,
            "augment.hand_scale_min" => a.part_aware.hand_scale_range.0 = parse(key, v)?,
            "augment.hand_scale_max" => a.part_aware.hand_scale_range.1 = parse(key, v)?,
            "augment.face_jitter_sigma" => a.part_aware.face_jitter_sigma = parse(key, v)?,
            "augment.body_jitter_sigma" => a.part_aware.body_jitter_sigma = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every key with its resolved value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (s, m, t) = (&self.synth, &self.model, &self.train);
        let a = &t.augment;
        let mut out = vec![
            kv("run.seed", self.seed),
            kv("data.root", self.data_root.display()),
            kv("data.out", self.out_dir.display()),
            kv("data.modality", t.modality),
            kv("synth.vocab_size", s.vocab_size),
            kv("synth.n_samples", s.n_samples),
            kv("synth.sentence_len_min", s.sentence_len.0),
            kv("synth.sentence_len_max", s.sentence_len.1),
            kv("synth.frames_per_gloss_min", s.frames_per_gloss.0),
            kv("synth.frames_per_gloss_max", s.frames_per_gloss.1),
            kv("synth.n_signers", s.n_signers),
            kv("synth.heldout_signers", s.heldout_signers),
            kv("synth.noise_sigma", s.noise_sigma),
            kv("model.kind", m.kind),
            kv("model.compressor_layers", m.compressor.n_layers),
            kv("model.channels", m.compressor.channels),
            kv("model.kernel", m.compressor.kernel),
            kv("model.stride", m.compressor.stride),
            kv("model.padding", m.compressor.padding),
            kv("model.d_model", m.d_model),
            kv("model.n_layers", m.n_layers),
            kv("model.n_heads", m.n_heads),
            kv("model.ffn_mult", m.ffn_mult),
            kv("model.dropout", m.dropout_p),
            kv("model.max_prefix_len", m.max_prefix_len),
            kv("model.max_text_len", m.max_text_len),
        ];
        if let Some(p) = &t.init_from {
            out.push(kv("model.init_from", p.display()));
        }
        out.extend([
            kv("train.epochs", t.epochs),
            kv("train.batch_size", t.batch_size_train),
            kv("train.eval_batch_size", t.batch_size_eval),
            kv("train.lr", t.lr),
            kv("train.weight_decay", t.weight_decay),
            kv("train.beta1", t.betas.0),
            kv("train.beta2", t.betas.1),
            kv("train.eps", t.eps),
            kv("train.scheduler", t.scheduler.enabled),
            kv("train.t0", t.scheduler.t0),
            kv("train.t_mult", t.scheduler.t_mult),
            kv("train.lr_min", t.scheduler.lr_min),
            kv("train.patience", t.early_stop_patience),
            kv("train.max_decode_len", t.max_decode_len),
            kv("train.beam_size", t.beam_size),
        ]);
        if let Some(b) = t.time_budget_secs {
            out.push(kv("train.time_budget_secs", b));
        }
        out.extend([
            kv("augment.enabled", a.enabled),
            kv("augment.jitter_sigma", a.jitter_sigma),
            kv("augment.scale_min", a.scale_range.0),
            kv("augment.scale_max", a.scale_range.1),
            kv("augment.temporal_mask_p", a.temporal_mask_p),
            kv("augment.frame_dropout_p", a.frame_dropout_p),
            kv("augment.time_warp_max_shift", a.time_warp_max_shift),
            kv("augment.per_aug_apply_p", a.per_aug_apply_p),
            kv("augment.part_aware", a.part_aware.enabled),
            kv("augment.hand_rot_max_deg", a.part_aware.hand_rot_max_deg),
            kv("augment.hand_scale_min", a.part_aware.hand_scale_range.0),
            kv("augment.hand_scale_max", a.part_aware.hand_scale_range.1),
            kv("augment.face_jitter_sigma", a.part_aware.face_jitter_sigma),
            kv("augment.body_jitter_sigma", a.part_aware.body_jitter_sigma),
        ]);
        out
    }

    /// The fully resolved configuration as config-file text.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;
    use crate::pose::Modality;

    #[test]
    fn parses_comments_and_values() {
        let cfg = RunConfig::parse(
            "# run\nrun.seed = 42\n\nmodel.kind = ctc  # baseline\ndata.modality = hands_only\ntrain.scheduler = false\naugment.scale_min = 0.9\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.model.kind, ModelKind::Ctc);
        assert_eq!(cfg.train.modality, Modality::HandsOnly);
        assert!(!cfg.train.scheduler.enabled);
        assert_eq!(cfg.train.augment.scale_range, (0.9, 1.15));
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(matches!(RunConfig::parse("model.colour = red"), Err(ConfigError::UnknownKey { line: 1, .. })));
        assert!(matches!(RunConfig::parse("run.seed = 1\nrun.seed = 2"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(RunConfig::parse("just words"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(RunConfig::parse("train.lr = fast"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::parse("data.modality = everything"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::parse("model.n_heads = 5"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::parse("train.time_budget_secs = 60\nmodel.init_from = w.ck\nsynth.noise_sigma = 0.5").unwrap();
        cfg.set_seed(9);
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }
}
