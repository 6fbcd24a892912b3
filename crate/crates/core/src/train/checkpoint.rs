//! Binary checkpoint: `u64` LE manifest length, JSON manifest, raw LE payload.
//!
//! The manifest maps every tensor name to `{dtype, shape, offset, nbytes}`
//! (offsets relative to the payload start) and carries run metadata under
//! `__meta__`. Optimizer moments are stored as `adam.m.<param>` / `adam.v.<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autodiff::{DType, Element};
use crate::model::{Model, ModelConfig};
use crate::{Error, Result};

use super::optim::OptimizerState;
use super::run::TrainState;
use super::{DataConfig, TrainConfig};

const META: &str = "__meta__";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawTensor {
    pub fn encode<T: Element>(shape: &[usize], values: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * T::DTYPE.size_in_bytes());
        values.iter().for_each(|v| v.write_le(&mut bytes));
        Self {
            dtype: T::DTYPE,
            shape: shape.to_vec(),
            bytes,
        }
    }

    pub fn decode<T: Element>(&self, name: &str) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::checkpoint(
                format!("{name}.dtype"),
                format!("stored as {}, expected {}", self.dtype.as_str(), T::DTYPE.as_str()),
            ));
        }
        Ok(self.bytes.chunks_exact(T::DTYPE.size_in_bytes()).map(T::read_le).collect())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    data: DataConfig,
    step: u64,
    tokens_seen: u64,
    optimizer_step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub step: u64,
    pub tokens_seen: u64,
    pub optimizer_step: u64,
    pub tensors: BTreeMap<String, RawTensor>,
}

impl Checkpoint {
    pub fn capture<T: Element>(state: &TrainState<T>, train: &TrainConfig, data: &DataConfig) -> Self {
        let mut tensors = BTreeMap::new();
        for (id, p) in state.model.params.iter() {
            let shape = p.tensor.shape();
            tensors.insert(p.name.clone(), RawTensor::encode(shape, p.tensor.data()));
            tensors.insert(format!("adam.m.{}", p.name), RawTensor::encode(shape, &state.optimizer.m[id.index()]));
            tensors.insert(format!("adam.v.{}", p.name), RawTensor::encode(shape, &state.optimizer.v[id.index()]));
        }
        Self {
            model: state.model.config.clone(),
            train: train.clone(),
            data: data.clone(),
            step: state.step,
            tokens_seen: state.tokens_seen,
            optimizer_step: state.optimizer.step,
            tensors,
        }
    }

    /// Rebuilds the model and optimizer; the checkpoint element type must be `T`.
    pub fn restore<T: Element>(&self) -> Result<TrainState<T>> {
        let mut model = Model::<T>::new(self.model.clone(), self.train.seed)?;
        let mut optimizer = OptimizerState::new(&model.params);
        let ids: Vec<_> = model.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let want = model.params.tensor(id).shape().to_vec();
            let fetch = |key: String| -> Result<Vec<T>> {
                let raw = self.tensors.get(&key).ok_or_else(|| Error::checkpoint(key.clone(), "missing tensor"))?;
                if raw.shape != want {
                    return Err(Error::checkpoint(
                        format!("{key}.shape"),
                        format!("{:?} does not match model shape {want:?}", raw.shape),
                    ));
                }
                raw.decode(&key)
            };
            let values = fetch(name.clone())?;
            optimizer.m[id.index()] = fetch(format!("adam.m.{name}"))?;
            optimizer.v[id.index()] = fetch(format!("adam.v.{name}"))?;
            model.params.tensor_mut(id).data_mut().copy_from_slice(&values);
        }
        optimizer.step = self.optimizer_step;
        Ok(TrainState {
            model,
            optimizer,
            step: self.step,
            tokens_seen: self.tokens_seen,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Map::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let entry = Entry {
                dtype: t.dtype.as_str().into(),
                shape: t.shape.clone(),
                offset,
                nbytes: t.bytes.len() as u64,
            };
            manifest.insert(name.clone(), serde_json::to_value(entry)?);
            offset += t.bytes.len() as u64;
        }
        let meta = Meta {
            model: self.model.clone(),
            train: self.train.clone(),
            data: self.data.clone(),
            step: self.step,
            tokens_seen: self.tokens_seen,
            optimizer_step: self.optimizer_step,
        };
        manifest.insert(META.into(), serde_json::to_value(meta)?);
        let header = serde_json::to_vec(&Value::Object(manifest))?;
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len_field = "manifest_length";
        let head: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::checkpoint(len_field, format!("file has {} bytes, needs at least 8", bytes.len())))?;
        let mlen = u64::from_le_bytes(head);
        let body = &bytes[8..];
        if mlen > body.len() as u64 {
            return Err(Error::checkpoint(
                len_field,
                format!("{mlen} exceeds the {} bytes after the length prefix", body.len()),
            ));
        }
        let (header, payload) = body.split_at(mlen as usize);
        let manifest: Map<String, Value> = serde_json::from_slice(header).map_err(|e| Error::checkpoint("manifest", e.to_string()))?;
        let meta = manifest.get(META).ok_or_else(|| Error::checkpoint(META, "missing"))?;
        let meta: Meta = serde_json::from_value(meta.clone()).map_err(|e| Error::checkpoint(META, e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, v) in manifest.iter().filter(|(k, _)| *k != META) {
            let e: Entry = serde_json::from_value(v.clone()).map_err(|err| Error::checkpoint(name.clone(), err.to_string()))?;
            let dtype = DType::parse(&e.dtype).ok_or_else(|| Error::checkpoint(format!("{name}.dtype"), format!("unknown dtype `{}`", e.dtype)))?;
            let end = e.offset.checked_add(e.nbytes).filter(|&end| end <= payload.len() as u64).ok_or_else(|| {
                Error::checkpoint(
                    format!("{name}.offset"),
                    format!("range {}+{} overflows the {}-byte payload", e.offset, e.nbytes, payload.len()),
                )
            })?;
            let numel = e.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
            let expected = numel.and_then(|n| n.checked_mul(dtype.size_in_bytes() as u64));
            if e.shape.is_empty() || e.shape.contains(&0) || expected != Some(e.nbytes) {
                return Err(Error::checkpoint(
                    format!("{name}.nbytes"),
                    format!("{} bytes do not match shape {:?} of {}", e.nbytes, e.shape, e.dtype),
                ));
            }
            tensors.insert(
                name.clone(),
                RawTensor {
                    dtype,
                    shape: e.shape,
                    bytes: payload[e.offset as usize..end as usize].to_vec(),
                },
            );
        }
        Ok(Self {
            model: meta.model,
            train: meta.train,
            data: meta.data,
            step: meta.step,
            tokens_seen: meta.tokens_seen,
            optimizer_step: meta.optimizer_step,
            tensors,
        })
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
