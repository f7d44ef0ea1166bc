//! The pose-prefix decoder-only transformer and its CTC sibling.
//!
//! Both kinds share the temporal compressor and the transformer block stack.
//! The autoregressive kind prepends the compressed pose sequence to the
//! gloss token stream under a single causal mask; the CTC kind runs the same
//! blocks bidirectionally over the compressed poses and classifies each step.

mod checkpoint;
mod decode;
mod forward;

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::pose::DataError;
use crate::rng::{hash_str, RngStream};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{beam_search, greedy_search, sequence_log_prob, Hypothesis};
pub use forward::{
    build_causal_mask, combine_masks, downsample_mask, encode_prefix, forward_teacher_forced, generate_beam, generate_greedy,
    next_token_log_probs, run_blocks, single_example_loss, step_by_step_loss, teacher_forced_loss, Mode, Prefix,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{what} length {len} exceeds capacity {max}")]
    Capacity { what: &'static str, len: usize, max: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Autoregressive,
    Ctc,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Autoregressive => "autoregressive",
            ModelKind::Ctc => "ctc",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autoregressive" => Ok(ModelKind::Autoregressive),
            "ctc" => Ok(ModelKind::Ctc),
            other => Err(ModelError::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Strided 1-D convolution stack. Zero layers means a per-frame linear
/// projection with no temporal compression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressorConfig {
    pub n_layers: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        CompressorConfig { n_layers: 2, channels: 512, kernel: 3, stride: 2, padding: 1 }
    }
}

impl CompressorConfig {
    /// Compressed length for `frames` input frames, `None` when too short.
    pub fn out_len(&self, frames: usize) -> Option<usize> {
        (0..self.n_layers).try_fold(frames, |len, _| crate::tensor::conv_out_len(len, self.kernel, self.stride, self.padding))
    }

    /// Width of the features fed into the d_model projection.
    pub fn out_channels(&self, input_dim: usize) -> usize {
        if self.n_layers == 0 {
            input_dim
        } else {
            self.channels
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub compressor: CompressorConfig,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub dropout_p: f64,
    pub max_prefix_len: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Autoregressive,
            input_dim: 134,
            compressor: CompressorConfig::default(),
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            ffn_mult: 4,
            dropout_p: 0.1,
            max_prefix_len: 512,
            max_text_len: 32,
            vocab_size: 24,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        let c = &self.compressor;
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_mult", self.ffn_mult),
            ("max_prefix_len", self.max_prefix_len),
            ("max_text_len", self.max_text_len),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if c.n_layers > 0 && (c.channels == 0 || c.kernel == 0 || c.stride == 0) {
            return err("compressor channels, kernel and stride must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return err(format!("dropout must lie in [0, 1), got {}", self.dropout_p));
        }
        if self.vocab_size <= crate::pose::UNK + 1 {
            return err(format!("vocab_size {} leaves no room for gloss tokens", self.vocab_size));
        }
        Ok(())
    }

    /// Width of the output head: the vocabulary, plus a blank class for CTC.
    pub fn n_classes(&self) -> usize {
        match self.kind {
            ModelKind::Autoregressive => self.vocab_size,
            ModelKind::Ctc => self.vocab_size + 1,
        }
    }

    /// Canonical `model.key = value` lines.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let c = &self.compressor;
        [
            ("kind", self.kind.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("compressor_layers", c.n_layers.to_string()),
            ("channels", c.channels.to_string()),
            ("kernel", c.kernel.to_string()),
            ("stride", c.stride.to_string()),
            ("padding", c.padding.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("dropout", self.dropout_p.to_string()),
            ("max_prefix_len", self.max_prefix_len.to_string()),
            ("max_text_len", self.max_text_len.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("model.{k}"), v))
        .collect()
    }

    /// Inverse of [`ModelConfig::to_kv`]. Every key must be present.
    pub fn from_kv(kv: &HashMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            kv.get(&format!("model.{k}"))
                .map(String::as_str)
                .ok_or_else(|| ModelError::Config(format!("missing key model.{k}")))
        };
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| ModelError::Config(format!("model.{k}: cannot parse `{v}`")))
        }
        let u = |k: &str| get(k).and_then(|v| num::<usize>(k, v));
        let cfg = ModelConfig {
            kind: get("kind")?.parse()?,
            input_dim: u("input_dim")?,
            compressor: CompressorConfig {
                n_layers: u("compressor_layers")?,
                channels: u("channels")?,
                kernel: u("kernel")?,
                stride: u("stride")?,
                padding: u("padding")?,
            },
            d_model: u("d_model")?,
            n_layers: u("n_layers")?,
            n_heads: u("n_heads")?,
            ffn_mult: u("ffn_mult")?,
            dropout_p: num("dropout", get("dropout")?)?,
            max_prefix_len: u("max_prefix_len")?,
            max_text_len: u("max_text_len")?,
            vocab_size: u("vocab_size")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Name, shape and initializer of every learnable array, in storage order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.d_model;
        let c = &self.compressor;
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });
        let mut c_in = self.input_dim;
        for i in 0..c.n_layers {
            let fan_in = c_in * c.kernel;
            push(format!("comp.{i}.w"), vec![c.channels, c_in, c.kernel], Init::Normal(1.0 / (fan_in as f64).sqrt()));
            push(format!("comp.{i}.b"), vec![c.channels], Init::Zeros);
            c_in = c.channels;
        }
        push("proj.w".into(), vec![c_in, d], Init::Normal(0.02));
        push("proj.b".into(), vec![d], Init::Zeros);
        push("prefix_pos".into(), vec![self.max_prefix_len, d], Init::Normal(0.02));
        if self.kind == ModelKind::Autoregressive {
            push("tok_emb".into(), vec![self.vocab_size, d], Init::Normal(0.02));
            push("text_pos".into(), vec![self.max_text_len, d], Init::Normal(0.02));
        }
        let resid = 0.02 / ((2 * self.n_layers) as f64).sqrt();
        let f = self.ffn_mult * d;
        for l in 0..self.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            push(p("ln1.g"), vec![d], Init::Ones);
            push(p("ln1.b"), vec![d], Init::Zeros);
            push(p("attn.qkv.w"), vec![d, 3 * d], Init::Normal(0.02));
            push(p("attn.qkv.b"), vec![3 * d], Init::Zeros);
            push(p("attn.out.w"), vec![d, d], Init::Normal(resid));
            push(p("attn.out.b"), vec![d], Init::Zeros);
            push(p("ln2.g"), vec![d], Init::Ones);
            push(p("ln2.b"), vec![d], Init::Zeros);
            push(p("ffn.w1"), vec![d, f], Init::Normal(0.02));
            push(p("ffn.b1"), vec![f], Init::Zeros);
            push(p("ffn.w2"), vec![f, d], Init::Normal(resid));
            push(p("ffn.b2"), vec![d], Init::Zeros);
        }
        push("ln_f.g".into(), vec![d], Init::Ones);
        push("ln_f.b".into(), vec![d], Init::Zeros);
        push("head.w".into(), vec![d, self.n_classes()], Init::Normal(0.02));
        push("head.b".into(), vec![self.n_classes()], Init::Zeros);
        specs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Every learnable array of a model, addressable by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Random initialization. Each array draws from its own stream keyed by
    /// `(seed, name)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let mut rng = RngStream::keyed(seed, &[hash_str("init"), hash_str(&spec.name)]);
                    let dist = Normal::new(0.0, std).map_err(|e| ModelError::Config(e.to_string()))?;
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            tensors.push(Tensor::new(spec.shape, data)?.with_grad());
            names.push(spec.name);
        }
        Ok(Self::assemble(config.clone(), names, tensors))
    }

    /// Builds a parameter set from named arrays, which must match the
    /// configuration's specs exactly.
    pub fn from_arrays(config: &ModelConfig, arrays: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != arrays.len() {
            return Err(ModelError::Checkpoint(format!("expected {} arrays, found {}", specs.len(), arrays.len())));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.into_iter().zip(arrays) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "array `{name}` {:?} does not match expected `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            names.push(name);
            tensors.push(t.with_grad());
        }
        Ok(Self::assemble(config.clone(), names, tensors))
    }

    fn assemble(config: ModelConfig, names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        ModelParams { config, names, tensors, index }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copies every array of `other` whose name and shape match. Returns the
    /// number of arrays copied. This is the hook for externally supplied
    /// embedding or block weights.
    pub fn load_matching(&mut self, other: &ModelParams) -> usize {
        let mut copied = 0;
        for (name, t) in other.names.iter().zip(&other.tensors) {
            if let Some(&i) = self.index.get(name) {
                if self.tensors[i].shape() == t.shape() {
                    self.tensors[i].data_mut().copy_from_slice(t.data());
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Records every array on `tape`. With `track` unset the arrays are
    /// constants and no gradient bookkeeping is done.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if track {
                    tape.param(t)
                } else {
                    tape.leaf(Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("consistent tensor"))
                }
            })
            .collect();
        Bound { params: self, vars }
    }
}

/// Parameters recorded on a tape.
pub struct Bound<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
}

impl<'p> Bound<'p> {
    pub fn var(&self, name: &str) -> Var {
        match self.params.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("no parameter named `{name}`"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn config(&self) -> &'p ModelConfig {
        &self.params.config
    }
}

#[cfg(test)]
mod tests;
