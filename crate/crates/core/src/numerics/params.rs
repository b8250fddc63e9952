use std::collections::HashMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn new(index: usize) -> Self {
        Self(index)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    /// Xavier-uniform initialized `rows × cols` matrix.
    pub fn add_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId, NumericsError> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        self.add(name, Tensor::matrix(rows, cols, data)?)
    }

    /// Small-normal initialized table, used for embeddings.
    pub fn add_embedding<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId, NumericsError> {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, std).map_err(|_| NumericsError::InvalidArgument("bad std"))?;
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, len: usize, value: f64) -> Result<ParamId, NumericsError> {
        self.add(name, Tensor::filled(&[1, len], value))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Overwrites a tensor's values, keeping its shape.
    pub fn assign(&mut self, id: ParamId, values: &Tensor) -> Result<(), NumericsError> {
        let dst = &mut self.tensors[id.0];
        if dst.shape() != values.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "assign",
                left: dst.shape().to_vec(),
                right: values.shape().to_vec(),
            });
        }
        dst.data_mut().copy_from_slice(values.data());
        Ok(())
    }

    pub fn count_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and little-endian payloads of the parameters
    /// whose name starts with `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Gradients keyed by parameter, absent for parameters a pass did not touch.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Self {
            slots: vec![None; num_params],
        }
    }

    pub fn set(&mut self, id: ParamId, g: Vec<f64>) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        self.slots[id.0] = Some(g);
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Drops gradients of parameters whose name does not start with `prefix`.
    pub fn retain_prefix(&mut self, store: &ParamStore, prefix: &str) {
        for (i, slot) in self.slots.iter_mut().enumerate() {
            if !store.name(ParamId(i)).starts_with(prefix) {
                *slot = None;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}
