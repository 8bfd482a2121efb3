//! Named parameters, initialisation and the checkpoint format.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::Real;
use crate::datamodel::{check_tag, file_name, pair_paths, read_f32_payload, read_json, write_f32_payload, write_json};
use crate::error::{Error, Result};

const CHECKPOINT_FORMAT: &str = "tipnet-checkpoint";

/// Stable handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter is drawn by [`ParamStore::init`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform(−a, a) with a = sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

impl Init {
    pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub init: Init,
}

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Register a parameter; values start at zero until [`init`](Self::init).
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        let values = match init {
            Init::Ones => vec![T::one(); n],
            _ => vec![T::zero(); n],
        };
        self.params.push(Parameter {
            name,
            shape: shape.to_vec(),
            values,
            init,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.values.len())
            .sum()
    }

    /// Draw every parameter according to its [`Init`], in registration order.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for p in &mut self.params {
            match p.init {
                Init::Xavier { fan_in, fan_out } => {
                    let a = Init::xavier_bound(fan_in, fan_out);
                    for v in &mut p.values {
                        *v = T::of(rng.random_range(-a..a));
                    }
                }
                Init::Zeros => p.values.fill(T::zero()),
                Init::Ones => p.values.fill(T::one()),
            }
        }
    }

    /// Same layout in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: p.values.iter().map(|v| U::of(v.f64())).collect(),
                    init: p.init,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Copy values from a store with the same names and shapes.
    pub fn copy_values_from<U: Real>(&mut self, other: &ParamStore<U>) -> Result<()> {
        for p in &mut self.params {
            let id = other
                .id(&p.name)
                .ok_or_else(|| Error::format("tensors", format!("missing parameter {}", p.name)))?;
            let q = other.get(id);
            if q.shape != p.shape {
                return Err(Error::format(
                    "tensors",
                    format!("{}: shape {:?}, expected {:?}", p.name, q.shape, p.shape),
                ));
            }
            for (d, s) in p.values.iter_mut().zip(&q.values) {
                *d = T::of(s.f64());
            }
        }
        Ok(())
    }

    /// Write a `.ckpt.json` manifest and `.ckpt.f32` payload.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let (header_path, payload_path) = pair_paths(path.as_ref(), "ckpt", "f32")?;
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut payload = Vec::with_capacity(self.numel());
        for p in &self.params {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                offset: payload.len(),
            });
            payload.extend(p.values.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)));
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            dtype: "f32le".into(),
            payload: file_name(&payload_path),
            payload_bytes: payload.len() * 4,
            tensors,
        };
        write_f32_payload(&payload_path, &payload)?;
        write_json(&header_path, &manifest)
    }

    /// Load values into this store. Names and shapes must match exactly.
    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let (header_path, payload_path) = pair_paths(path.as_ref(), "ckpt", "f32")?;
        let m: CheckpointManifest = read_json(&header_path)?;
        check_tag("format", &m.format, CHECKPOINT_FORMAT)?;
        check_tag("dtype", &m.dtype, "f32le")?;
        if m.payload_bytes % 4 != 0 {
            return Err(Error::format("payload_bytes", "not a multiple of 4".to_string()));
        }
        let payload = read_f32_payload(&payload_path, m.payload_bytes / 4)?;
        if m.tensors.len() != self.params.len() {
            return Err(Error::format(
                "tensors",
                format!("checkpoint has {} tensors, model has {}", m.tensors.len(), self.params.len()),
            ));
        }
        let mut staged = Vec::with_capacity(m.tensors.len());
        for t in &m.tensors {
            let id = self
                .id(&t.name)
                .ok_or_else(|| Error::format("tensors", format!("unknown parameter {}", t.name)))?;
            let p = &self.params[id.0];
            if p.shape != t.shape {
                return Err(Error::format(
                    "tensors",
                    format!("{}: shape {:?}, model expects {:?}", t.name, t.shape, p.shape),
                ));
            }
            let n = p.values.len();
            let chunk = payload
                .get(t.offset..t.offset + n)
                .ok_or_else(|| Error::format("tensors", format!("{} overruns the payload", t.name)))?;
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(Error::format("payload", format!("{} holds non-finite values", t.name)));
            }
            staged.push((id, chunk));
        }
        for (id, chunk) in staged {
            for (d, &s) in self.params[id.0].values.iter_mut().zip(chunk) {
                *d = T::of(s as f64);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    version: u32,
    dtype: String,
    payload: String,
    payload_bytes: usize,
    tensors: Vec<TensorEntry>,
}
