//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ASCK" | u32 version
//! u32 n | n bytes of UTF-8 `key = value` lines (model config and modality)
//! u32 g | g × (u32 n | n bytes gloss token), gloss vocabulary in id order
//! u32 a | a × (u32 n | name | u32 rank | rank × u64 dim | numel × f64)
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::pose::{Modality, Vocabulary};
use crate::tensor::Tensor;

use super::{ModelConfig, ModelError, ModelParams, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ASCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to decode with a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub modality: Modality,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    /// Canonical configuration text stored in the file.
    pub fn config_text(&self) -> String {
        let mut kv = self.params.config().to_kv();
        kv.push(("data.modality".into(), self.modality.to_string()));
        kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits in u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn write_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, &ck.config_text());
    let glosses = ck.vocab.glosses();
    put_u32(&mut out, glosses.len());
    for g in glosses {
        put_str(&mut out, g);
    }
    put_u32(&mut out, ck.params.tensors().len());
    for (name, t) in ck.params.names().iter().zip(ck.params.tensors()) {
        put_str(&mut out, name);
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(ModelError::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ModelError::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let text = r.string()?;
    let mut kv = HashMap::new();
    for line in text.lines() {
        let (k, v) = line.split_once(" = ").ok_or_else(|| ModelError::Checkpoint(format!("bad config line `{line}`")))?;
        kv.insert(k.to_owned(), v.to_owned());
    }
    let config = ModelConfig::from_kv(&kv)?;
    let modality: Modality = kv
        .get("data.modality")
        .ok_or_else(|| ModelError::Checkpoint("missing data.modality".into()))?
        .parse()?;
    let n_glosses = r.u32()?;
    let glosses = (0..n_glosses).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let mut seen = std::collections::HashSet::new();
    if !glosses.iter().all(|g| seen.insert(g.as_str())) {
        return Err(ModelError::Checkpoint("duplicate vocabulary token".into()));
    }
    let vocab = Vocabulary::from_tokens(glosses);
    if vocab.len() != config.vocab_size {
        return Err(ModelError::Checkpoint(format!("vocabulary has {} ids, config says {}", vocab.len(), config.vocab_size)));
    }
    let n_arrays = r.u32()?;
    let mut arrays = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(numel) = numel.filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len())) else {
            return Err(ModelError::Checkpoint(format!("array `{name}` has an implausible shape {shape:?}")));
        };
        let raw = r.take(numel * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        arrays.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let params = ModelParams::from_arrays(&config, arrays)?;
    Ok(Checkpoint { params, modality, vocab })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_checkpoint(ck)).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    read_checkpoint(&bytes)
}
