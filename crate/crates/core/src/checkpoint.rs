//! Checkpoint archive: every parameter and optimizer tensor plus a JSON
//! metadata block (config, vocabulary, counters, RNG position), in one
//! file. Round trips are bit-exact, so a resumed run reproduces the
//! unbroken run step for step.
//!
//! Layout (all integers little-endian):
//!   magic "VCPT", version u32,
//!   meta_len u64, metadata JSON,
//!   n_tensors u64, then per tensor:
//!     name_len u64, name, rows u64, cols u64, rows*cols f64 values.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::model::ModelDims;
use crate::training::{AdamState, TrainingConfig};

const MAGIC: &[u8; 4] = b"VCPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RngState {
    /// ChaCha seed bytes, hex-encoded in JSON.
    pub seed: [u8; 32],
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainingConfig,
    pub dims: ModelDims,
    pub vocab_tokens: Vec<String>,
    pub epoch: u64,
    pub step: u64,
    pub epoch_seed: u64,
    pub batch_cursor: u64,
    pub rng: RngState,
    pub params: ParamStore,
    pub opt_all: AdamState,
    pub opt_meaning: AdamState,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: TrainingConfig,
    config_hash: String,
    dims: ModelDims,
    vocab: Vec<String>,
    epoch: u64,
    step: u64,
    epoch_seed: u64,
    batch_cursor: u64,
    rng: RngState,
    opt_all_t: u64,
    opt_meaning_t: u64,
}

fn push_store(tensors: &mut Vec<(String, Array2<f64>)>, prefix: &str, store: &ParamStore) {
    for (name, value) in store.iter() {
        tensors.push((format!("{prefix}{name}"), value.clone()));
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let meta = Metadata {
        config: ckpt.config.clone(),
        config_hash: ckpt.config.hash(),
        dims: ckpt.dims,
        vocab: ckpt.vocab_tokens.clone(),
        epoch: ckpt.epoch,
        step: ckpt.step,
        epoch_seed: ckpt.epoch_seed,
        batch_cursor: ckpt.batch_cursor,
        rng: ckpt.rng.clone(),
        opt_all_t: ckpt.opt_all.t,
        opt_meaning_t: ckpt.opt_meaning.t,
    };
    let meta_bytes = serde_json::to_vec(&meta).map_err(|e| Error::json(path, e))?;

    let mut tensors: Vec<(String, Array2<f64>)> = Vec::new();
    push_store(&mut tensors, "param.", &ckpt.params);
    push_store(&mut tensors, "opt_all.m.", &ckpt.opt_all.m);
    push_store(&mut tensors, "opt_all.v.", &ckpt.opt_all.v);
    push_store(&mut tensors, "opt_mean.m.", &ckpt.opt_meaning.m);
    push_store(&mut tensors, "opt_mean.v.", &ckpt.opt_meaning.v);

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, value) in &tensors {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(value.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(value.ncols() as u64).to_le_bytes());
        for &x in value.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::checkpoint(self.path, format!("truncated while reading {what}")));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let raw = self.take(8, what)?;
        Ok(u64::from_le_bytes(raw.try_into().expect("8 bytes")))
    }
}

/// Load a checkpoint. When `expected_config_hash` is given, a mismatch is
/// refused; resuming training under a different configuration is an error.
pub fn load_checkpoint(path: &Path, expected_config_hash: Option<&str>) -> Result<Checkpoint> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { path, bytes, pos: 0 };

    if r.take(4, "magic")? != MAGIC {
        return Err(Error::checkpoint(path, "bad magic, not a checkpoint"));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::checkpoint(path, format!("unsupported version {version}")));
    }
    let meta_len = r.u64("meta length")? as usize;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::json(path, e))?;
    if meta.config.hash() != meta.config_hash {
        return Err(Error::checkpoint(path, "config hash does not match stored config"));
    }
    if let Some(expected) = expected_config_hash {
        if expected != meta.config_hash {
            return Err(Error::checkpoint(
                path,
                format!(
                    "config hash mismatch: checkpoint has {}, caller expects {expected}",
                    meta.config_hash
                ),
            ));
        }
    }

    let n_tensors = r.u64("tensor count")? as usize;
    let mut params = ParamStore::new();
    let mut opt_all = AdamState { t: meta.opt_all_t, m: ParamStore::new(), v: ParamStore::new() };
    let mut opt_meaning =
        AdamState { t: meta.opt_meaning_t, m: ParamStore::new(), v: ParamStore::new() };
    for _ in 0..n_tensors {
        let name_len = r.u64("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| Error::checkpoint(path, "tensor name is not utf-8"))?;
        let rows = r.u64("tensor rows")? as usize;
        let cols = r.u64("tensor cols")? as usize;
        let raw = r.take(rows * cols * 8, "tensor data")?;
        let mut values = Vec::with_capacity(rows * cols);
        for chunk in raw.chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
        }
        let tensor = Array2::from_shape_vec((rows, cols), values)
            .expect("length matches rows * cols");
        if let Some(rest) = name.strip_prefix("param.") {
            params.insert(rest, tensor);
        } else if let Some(rest) = name.strip_prefix("opt_all.m.") {
            opt_all.m.insert(rest, tensor);
        } else if let Some(rest) = name.strip_prefix("opt_all.v.") {
            opt_all.v.insert(rest, tensor);
        } else if let Some(rest) = name.strip_prefix("opt_mean.m.") {
            opt_meaning.m.insert(rest, tensor);
        } else if let Some(rest) = name.strip_prefix("opt_mean.v.") {
            opt_meaning.v.insert(rest, tensor);
        } else {
            return Err(Error::checkpoint(path, format!("unknown tensor `{name}`")));
        }
    }
    if r.pos != r.bytes.len() {
        return Err(Error::checkpoint(path, "trailing bytes after tensors"));
    }

    Ok(Checkpoint {
        config: meta.config,
        dims: meta.dims,
        vocab_tokens: meta.vocab,
        epoch: meta.epoch,
        step: meta.step,
        epoch_seed: meta.epoch_seed,
        batch_cursor: meta.batch_cursor,
        rng: meta.rng,
        params,
        opt_all,
        opt_meaning,
    })
}
