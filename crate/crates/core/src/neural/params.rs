//! Named parameter storage, gradient accumulation and checkpoints.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::autodiff::{Gradients, Graph};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint file: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// Uniform in `(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(|_| rng.gen_range(-a..a)).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// All trainable tensors, addressed by dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Vec<f64>>,
    adam: BTreeMap<String, AdamState>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.adam.remove(&name);
        self.params.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn grads(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn adam_state(&self, name: &str) -> Option<&AdamState> {
        self.adam.get(name)
    }

    #[cfg(test)]
    pub(crate) fn adam_entry(&mut self, name: &str) -> &mut AdamState {
        self.adam.entry(name.to_owned()).or_default()
    }

    pub(crate) fn split_for_update(
        &mut self,
    ) -> (
        &mut BTreeMap<String, Tensor>,
        &BTreeMap<String, Vec<f64>>,
        &mut BTreeMap<String, AdamState>,
    ) {
        (&mut self.params, &self.grads, &mut self.adam)
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    /// Adds `g` into the gradient of `name`.
    pub fn accumulate_grad(&mut self, name: &str, g: &[f64]) {
        match self.grads.get_mut(name) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                self.grads.insert(name.to_owned(), g.to_vec());
            }
        }
    }

    /// Accumulates gradients of every parameter the graph registered,
    /// zero-filled for parameters the sweep did not reach. `filter` selects
    /// which names take part.
    pub fn accumulate_from(&mut self, graph: &Graph, grads: &Gradients, filter: impl Fn(&str) -> bool) {
        for (name, var) in graph.params() {
            if filter(name) {
                let g = grads.get_or_zero(graph, *var);
                self.accumulate_grad(name, &g);
            }
        }
    }

    /// Order-independent digest of every value whose name passes `filter`.
    pub fn checksum(&self, filter: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.params {
            if !filter(name) {
                continue;
            }
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in &t.data {
                h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    /// Writes the binary container to `path` and a JSON manifest to
    /// `path` with `.json` appended.
    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<(), CheckpointError> {
        let mut entries: Vec<(String, &[usize], &[f64], &'static str)> = Vec::new();
        for (name, t) in &self.params {
            entries.push((name.clone(), &t.shape, &t.data, "param"));
        }
        let adam_shapes: Vec<(String, Vec<usize>, Vec<usize>)> = self
            .adam
            .iter()
            .map(|(n, s)| (n.clone(), vec![s.m.len()], vec![s.v.len()]))
            .collect();
        for ((name, st), (_, ms, vs)) in self.adam.iter().zip(&adam_shapes) {
            entries.push((format!("{ADAM_M}{name}"), ms, &st.m, "adam_m"));
            entries.push((format!("{ADAM_V}{name}"), vs, &st.v, "adam_v"));
        }

        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (name, shape, data, _) in &entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for d in shape.iter() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            w.write_all(&(data.len() as u64).to_le_bytes())?;
            for v in data.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;

        let manifest = Manifest {
            format: "ctxfer-checkpoint".into(),
            version: FORMAT_VERSION,
            tensors: entries
                .iter()
                .map(|(name, shape, data, kind)| ManifestEntry {
                    name: name.clone(),
                    kind: (*kind).into(),
                    shape: shape.to_vec(),
                    numel: data.len(),
                })
                .collect(),
            adam_steps: self.adam.iter().map(|(n, s)| (n.clone(), s.t)).collect(),
            metadata,
        };
        std::fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path(path))?)?;
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| CheckpointError::Format("bad name".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|v| v as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = read_u64(&mut r)? as usize;
            if shape.iter().product::<usize>() != n {
                return Err(CheckpointError::Format(format!("{name}: shape/length mismatch")));
            }
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if let Some(p) = name.strip_prefix(ADAM_M) {
                store.adam.entry(p.to_owned()).or_default().m = data;
            } else if let Some(p) = name.strip_prefix(ADAM_V) {
                store.adam.entry(p.to_owned()).or_default().v = data;
            } else {
                store.params.insert(name, Tensor { shape, data });
            }
        }
        for (name, t) in manifest.adam_steps {
            if let Some(s) = store.adam.get_mut(&name) {
                s.t = t;
            }
        }
        Ok(store)
    }
}

const MAGIC: &[u8; 8] = b"CTXFCKPT";
const FORMAT_VERSION: u32 = 1;
const ADAM_M: &str = "@adam.m/";
const ADAM_V: &str = "@adam.v/";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    kind: String,
    shape: Vec<usize>,
    numel: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    tensors: Vec<ManifestEntry>,
    adam_steps: BTreeMap<String, u64>,
    metadata: serde_json::Value,
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

/// Reads only the metadata block of a checkpoint manifest.
pub fn load_metadata(path: &Path) -> Result<serde_json::Value, CheckpointError> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path(path))?)?;
    Ok(manifest.metadata)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
