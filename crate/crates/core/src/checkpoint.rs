//! Checkpoint bundles.
//!
//! A checkpoint is a directory holding `manifest.json` (format version and
//! model configuration), `weights.bin` (every base parameter), `lora.bin`
//! (adapter matrices, possibly none), `vocab.json`, and, for a run that can
//! be resumed, `train_state.json` with `optimizer.bin`.
//!
//! The `.bin` files are a flat list of named tensors: the magic `DCOTTEN1`,
//! a little-endian `u32` count, then per tensor a `u32` name length, the
//! UTF-8 name, a `u32` rank, `u64` extents and `f64` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::Vocabulary;
use crate::error::{Error, Result};
use crate::lora::{attach_policy, AdapterSet};
use crate::model::{Model, ModelConfig};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::param::ParamId;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::trainer::{Regime, TrainState};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DCOTTEN1";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const LORA_FILE: &str = "lora.bin";
pub const VOCAB_FILE: &str = "vocab.json";
pub const TRAIN_STATE_FILE: &str = "train_state.json";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterManifest {
    pub layers: Vec<usize>,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub package_version: String,
    pub config: ModelConfig,
    pub adapters: Option<AdapterManifest>,
    pub parameters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainStateFile {
    regime: Regime,
    seed: u64,
    batch_size: usize,
    step: usize,
    losses: Vec<f64>,
    optimizer: OptimizerConfig,
    optimizer_step: u64,
}

pub fn encode_tensors(items: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((items.len() as u32).to_le_bytes());
    for (name, t) in items {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Checkpoint("truncated tensor file".into()))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a tensor file".into()));
    }
    let n = r.u32()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes in tensor file".into()));
    }
    Ok(out)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn json_text<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn is_lora(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

/// Writes the model (and, if given, the resumable training state) to `dir`.
pub fn save_checkpoint(dir: &Path, model: &Model, train: Option<&TrainState>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        config: model.config.clone(),
        adapters: model.adapters.as_ref().map(|a| AdapterManifest {
            layers: a.layers.clone(),
            rank: a.rank,
        }),
        parameters: model.store.len(),
    };
    write(&dir.join(MANIFEST_FILE), json_text(&manifest)?)?;
    let (lora, base): (Vec<_>, Vec<_>) = model
        .store
        .iter()
        .map(|(_, p)| (p.name.clone(), &p.value))
        .partition(|(n, _)| is_lora(n));
    write(&dir.join(WEIGHTS_FILE), encode_tensors(&base))?;
    write(&dir.join(LORA_FILE), encode_tensors(&lora))?;
    write(&dir.join(VOCAB_FILE), json_text(&model.vocab.to_json())?)?;
    let state_path = dir.join(TRAIN_STATE_FILE);
    let opt_path = dir.join(OPTIMIZER_FILE);
    match train {
        Some(s) => {
            let file = TrainStateFile {
                regime: s.regime,
                seed: s.seed,
                batch_size: s.batch_size,
                step: s.step,
                losses: s.losses.clone(),
                optimizer: s.optimizer.config.clone(),
                optimizer_step: s.optimizer.step,
            };
            write(&state_path, json_text(&file)?)?;
            let mut moments = Vec::new();
            for (id, p) in model.store.iter() {
                for (tag, slot) in [("m", &s.optimizer.m), ("v", &s.optimizer.v)] {
                    if let Some(Some(t)) = slot.get(id.0) {
                        moments.push((format!("{tag}/{}", p.name), t));
                    }
                }
            }
            write(&opt_path, encode_tensors(&moments))?;
        }
        None => {
            for p in [&state_path, &opt_path] {
                if p.exists() {
                    fs::remove_file(p).map_err(|e| Error::io(p, e))?;
                }
            }
        }
    }
    Ok(())
}

/// Reads the manifest and checks its format version.
pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let text = String::from_utf8(read(&dir.join(MANIFEST_FILE))?)
        .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version:?} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))
}

fn load_values(model: &mut Model, items: Vec<(String, Tensor)>) -> Result<()> {
    for (name, t) in items {
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        model
            .store
            .set_value(id, t)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(())
}

/// Rebuilds a model from `dir`, with its training state when present.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, Option<TrainState>)> {
    let manifest = read_manifest(dir)?;
    let vocab_text = String::from_utf8(read(&dir.join(VOCAB_FILE))?)
        .map_err(|_| Error::Checkpoint("vocabulary is not UTF-8".into()))?;
    let vocab = Vocabulary::from_json(&serde_json::from_str(&vocab_text)?)?;
    let mut model = Model::new(manifest.config.clone(), vocab)?;
    if model.config != manifest.config {
        return Err(Error::Checkpoint("vocabulary size disagrees with the manifest".into()));
    }
    if let Some(a) = &manifest.adapters {
        let set: AdapterSet = attach_policy(
            &mut model.decoder,
            &mut model.store,
            &a.layers,
            a.rank,
            &mut RngStream::derive(model.config.seed, "lora"),
        )?;
        model.adapters = Some(set);
        model.store.set_all_trainable(true);
    }
    if model.store.len() != manifest.parameters {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, model has {}",
            manifest.parameters,
            model.store.len()
        )));
    }
    let base = decode_tensors(&read(&dir.join(WEIGHTS_FILE))?)?;
    let lora = decode_tensors(&read(&dir.join(LORA_FILE))?)?;
    if base.len() + lora.len() != manifest.parameters {
        return Err(Error::Checkpoint("tensor files do not cover every parameter".into()));
    }
    load_values(&mut model, base)?;
    load_values(&mut model, lora)?;

    let state_path = dir.join(TRAIN_STATE_FILE);
    if !state_path.exists() {
        return Ok((model, None));
    }
    let file: TrainStateFile = serde_json::from_slice(&read(&state_path)?)?;
    let mut optimizer = Optimizer::new(file.optimizer)?;
    optimizer.step = file.optimizer_step;
    let n = model.store.len();
    optimizer.m = vec![None; n];
    optimizer.v = vec![None; n];
    for (name, t) in decode_tensors(&read(&dir.join(OPTIMIZER_FILE))?)? {
        let (tag, pname) = name
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("bad moment name {name}")))?;
        let id: ParamId = model
            .store
            .find(pname)
            .ok_or_else(|| Error::Checkpoint(format!("moment for unknown parameter {pname}")))?;
        match tag {
            "m" => optimizer.m[id.0] = Some(t),
            "v" => optimizer.v[id.0] = Some(t),
            _ => return Err(Error::Checkpoint(format!("bad moment name {name}"))),
        }
    }
    let state = TrainState {
        regime: file.regime,
        seed: file.seed,
        batch_size: file.batch_size,
        step: file.step,
        losses: file.losses,
        optimizer,
    };
    Ok((model, Some(state)))
}
