//! On-disk checkpoints.
//!
//! A checkpoint is a directory holding:
//!
//! - `params.json` / `params.bin`: the model parameters
//! - `adam_m.*` / `adam_v.*`: optimizer moments in the same layout
//! - `state.json`: counters and the best-validation record
//! - `config.json`: the network and training configuration
//!
//! Each `.bin` file is the concatenation of little-endian float64 arrays in the
//! order listed by its `.json` manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::fusion::CtnConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the binary payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreManifest {
    dtype: String,
    byte_order: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    epoch: usize,
    step: u64,
    optimizer_steps: u64,
    best: Option<super::BestRecord>,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub model: CtnConfig,
    pub train: TrainConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`.
pub fn save_store(store: &ParamStore, dir: &Path, stem: &str) -> Result<()> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut bytes = Vec::with_capacity(store.num_scalars() * 8);
    let mut offset = 0;
    for (name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = StoreManifest {
        dtype: "float64".into(),
        byte_order: "little".into(),
        tensors,
    };
    write_json(&dir.join(format!("{stem}.json")), &manifest)?;
    let bin = dir.join(format!("{stem}.bin"));
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))
}

pub fn load_store(dir: &Path, stem: &str) -> Result<ParamStore> {
    let json = dir.join(format!("{stem}.json"));
    let manifest: StoreManifest = read_json(&json)?;
    if manifest.dtype != "float64" || manifest.byte_order != "little" {
        return Err(Error::format(&json, format!("unsupported {} {}", manifest.dtype, manifest.byte_order)));
    }
    let bin = dir.join(format!("{stem}.bin"));
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(&bin, "payload is not a whole number of float64 values"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut store = ParamStore::new();
    let mut expected = 0;
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected || e.offset + n > values.len() {
            return Err(Error::format(&bin, format!("tensor `{}` lies outside the payload", e.name)));
        }
        expected += n;
        let t = Tensor::from_vec(&e.shape, values[e.offset..e.offset + n].to_vec())?;
        store.insert(e.name, t).map_err(|err| Error::format(&json, err.to_string()))?;
    }
    if expected != values.len() {
        return Err(Error::format(&bin, format!("{} trailing values", values.len() - expected)));
    }
    Ok(store)
}

/// Writes the full training state and its configuration into `dir`.
pub fn save_checkpoint(dir: &Path, model: &CtnConfig, train: &TrainConfig, state: &TrainState) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_store(&state.params, dir, "params")?;
    save_store(&state.optimizer.m, dir, "adam_m")?;
    save_store(&state.optimizer.v, dir, "adam_v")?;
    write_json(
        &dir.join("state.json"),
        &StateFile {
            epoch: state.epoch,
            step: state.step,
            optimizer_steps: state.optimizer.t,
            best: state.best,
            seed: state.seed,
        },
    )?;
    write_json(
        &dir.join("config.json"),
        &RunConfigFile {
            model: model.clone(),
            train: train.clone(),
        },
    )
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(RunConfigFile, TrainState)> {
    if !dir.join("params.json").is_file() {
        return Err(Error::Dataset(format!("no checkpoint at {}", dir.display())));
    }
    let config: RunConfigFile = read_json(&dir.join("config.json"))?;
    let st: StateFile = read_json(&dir.join("state.json"))?;
    let params = load_store(dir, "params")?;
    let m = load_store(dir, "adam_m")?;
    let v = load_store(dir, "adam_v")?;
    if !params.same_layout(&m) || !params.same_layout(&v) {
        return Err(Error::format(dir, "optimizer moments do not match the parameters"));
    }
    let optimizer = AdamW {
        cfg: AdamWConfig::from(&config.train),
        m,
        v,
        t: st.optimizer_steps,
    };
    let state = TrainState {
        epoch: st.epoch,
        step: st.step,
        params,
        optimizer,
        best: st.best,
        seed: st.seed,
    };
    Ok((config, state))
}

/// Parameters and configuration only, for inference.
pub fn load_model(dir: &Path) -> Result<(CtnConfig, ParamStore)> {
    if !dir.join("params.json").is_file() {
        return Err(Error::Dataset(format!("no checkpoint at {}", dir.display())));
    }
    let config: RunConfigFile = read_json(&dir.join("config.json"))?;
    Ok((config.model, load_store(dir, "params")?))
}
