//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `TRISTAGE`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then
//! every tensor's raw little-endian payload at the offset the manifest
//! records (relative to the end of the manifest).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::{DType, Scalar, Tensor};

use super::config::TrainConfig;
use super::optim::Optimizer;

pub const MAGIC: &[u8; 8] = b"TRISTAGE";
pub const FORMAT_VERSION: u32 = 1;

/// Parameters and optimizer state at one precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained<T> {
    pub params: Params<T>,
    pub opt: Optimizer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    F32(Trained<f32>),
    F64(Trained<f64>),
}

impl Weights {
    pub fn dtype(&self) -> DType {
        match self {
            Weights::F32(_) => DType::F32,
            Weights::F64(_) => DType::F64,
        }
    }

    pub fn params_f64(&self) -> Params<f64> {
        match self {
            Weights::F32(t) => t.params.cast(),
            Weights::F64(t) => t.params.clone(),
        }
    }
}

/// Every random draw derives from `seed` and the epoch index, so these two
/// numbers are the complete generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub weights: Weights,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    /// `param`, `adam_m` or `adam_v`.
    group: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: TrainConfig,
    class_names: Vec<String>,
    epoch: usize,
    rng: RngState,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

fn groups<T: Scalar>(t: &Trained<T>) -> [&Params<T>; 3] {
    [&t.params, &t.opt.m, &t.opt.v]
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let step = match &self.weights {
            Weights::F32(t) => {
                push_groups(t, &mut payload, &mut tensors);
                t.opt.step
            }
            Weights::F64(t) => {
                push_groups(t, &mut payload, &mut tensors);
                t.opt.step
            }
        };
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            epoch: self.epoch,
            rng: self.rng,
            optimizer_step: step,
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serialises");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(origin, m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if mlen > body.len() {
            return Err(bad("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen]).map_err(|e| bad(format!("manifest: {e}")))?;
        let payload = &body[mlen..];
        let dtype = manifest.tensors.first().map_or(manifest.config.precision, |t| t.dtype);
        let weights = match dtype {
            DType::F32 => Weights::F32(read_groups(&manifest, payload, origin)?),
            DType::F64 => Weights::F64(read_groups(&manifest, payload, origin)?),
        };
        manifest.config.model.validate().map_err(|e| bad(e.to_string()))?;
        Ok(Checkpoint {
            config: manifest.config,
            class_names: manifest.class_names,
            epoch: manifest.epoch,
            rng: manifest.rng,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

fn push_groups<T: Scalar>(t: &Trained<T>, payload: &mut Vec<u8>, entries: &mut Vec<TensorEntry>) {
    for (group, params) in GROUPS.iter().zip(groups(t)) {
        for (name, tensor) in params.iter() {
            let offset = payload.len();
            for &v in tensor.data() {
                v.write_le(payload);
            }
            entries.push(TensorEntry {
                name: name.clone(),
                group: group.to_string(),
                dtype: T::DTYPE,
                shape: tensor.shape().to_vec(),
                offset,
                nbytes: payload.len() - offset,
            });
        }
    }
}

fn read_groups<T: Scalar>(m: &Manifest, payload: &[u8], origin: &Path) -> Result<Trained<T>> {
    let bad = |msg: String| Error::format(origin, msg);
    let mut sets = [Params::new(), Params::new(), Params::new()];
    for e in &m.tensors {
        if e.dtype != T::DTYPE {
            return Err(bad(format!("{}: mixed tensor dtypes", e.name)));
        }
        let gi = GROUPS
            .iter()
            .position(|g| *g == e.group)
            .ok_or_else(|| bad(format!("{}: unknown group {:?}", e.name, e.group)))?;
        let count: usize = e.shape.iter().product();
        let size = T::DTYPE.size();
        if e.nbytes != count * size || e.offset.checked_add(e.nbytes).is_none_or(|end| end > payload.len()) {
            return Err(bad(format!("{}: payload out of bounds or wrong size", e.name)));
        }
        let data = payload[e.offset..e.offset + e.nbytes].chunks_exact(size).map(T::read_le).collect();
        sets[gi].insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    let [params, mom, vel] = sets;
    let expected: Params<T> = m.config.model.init_params(0).map_err(|e| bad(e.to_string()))?;
    for set in [&params, &mom, &vel] {
        let names: Vec<_> = set.names().collect();
        let want: Vec<_> = expected.names().collect();
        if names != want {
            return Err(bad("tensor set does not match the model configuration".into()));
        }
        for (name, t) in set.iter() {
            if t.shape() != expected.get(name)?.shape() {
                return Err(bad(format!("{name}: shape {:?} does not match the model", t.shape())));
            }
        }
    }
    let opt = Optimizer { cfg: m.config.optimizer.clone(), step: m.optimizer_step, m: mom, v: vel };
    Ok(Trained { params, opt })
}
