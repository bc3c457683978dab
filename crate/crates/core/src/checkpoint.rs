//! Checkpoint directory: `manifest.json` (names, shapes, dtype, step,
//! configs) plus one raw little-endian f32 file per tensor, and the vocabulary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{ParamStore, Tensor};
use crate::train::{AdamState, TrainConfig};

pub const MANIFEST: &str = "manifest.json";
pub const VOCAB: &str = "vocab.json";
const FORMAT: &str = "vidcap-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

/// Training randomness is a pure function of `(seed, step)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    step: usize,
    adam_t: usize,
    rng: RngState,
    model: ModelConfig,
    train: TrainConfig,
    params: Vec<TensorEntry>,
    adam_m: Vec<TensorEntry>,
    adam_v: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub vocab: Vocabulary,
}

fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_tensor(path: &Path, shape: &[usize]) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let numel: usize = shape.iter().product();
    if bytes.len() != numel * 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            msg: format!("expected {} bytes for shape {shape:?}", numel * 4),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn write_group(dir: &Path, prefix: &str, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<Vec<TensorEntry>> {
    tensors
        .iter()
        .map(|(name, t)| {
            let file = format!("{prefix}{name}.bin");
            write_tensor(&dir.join(&file), t)?;
            Ok(TensorEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            })
        })
        .collect()
}

fn read_group(dir: &Path, entries: &[TensorEntry]) -> Result<BTreeMap<String, Tensor<f32>>> {
    entries
        .iter()
        .map(|e| Ok((e.name.clone(), read_tensor(&dir.join(&e.file), &e.shape)?)))
        .collect()
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let values: BTreeMap<String, Tensor<f32>> = self.params.iter().map(|(n, p)| (n.to_owned(), p.value.clone())).collect();
        let manifest = Manifest {
            format: FORMAT.into(),
            dtype: "f32".into(),
            step: self.step,
            adam_t: self.adam.t,
            rng: RngState {
                seed: self.train.seed,
                next_step: self.step,
            },
            model: self.model.clone(),
            train: self.train.clone(),
            params: write_group(dir, "param.", &values)?,
            adam_m: write_group(dir, "adam_m.", &self.adam.m)?,
            adam_v: write_group(dir, "adam_v.", &self.adam.v)?,
        };
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        self.vocab.save(&dir.join(VOCAB))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path: PathBuf = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if m.format != FORMAT || m.dtype != "f32" {
            return Err(Error::Format {
                path,
                offset: 0,
                msg: format!("unsupported checkpoint {} / {}", m.format, m.dtype),
            });
        }
        let mut params = ParamStore::new();
        for (name, t) in read_group(dir, &m.params)? {
            params.insert(name, t)?;
        }
        let adam = AdamState {
            m: read_group(dir, &m.adam_m)?,
            v: read_group(dir, &m.adam_v)?,
            t: m.adam_t,
        };
        Ok(Self {
            step: m.step,
            model: m.model,
            train: m.train,
            params,
            adam,
            vocab: Vocabulary::load(&dir.join(VOCAB))?,
        })
    }
}
