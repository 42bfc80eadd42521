use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DenseTensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors. Ids are dense and stable for the life of the store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DenseTensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseTensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    /// Fan-in scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    ///
    /// The generator is keyed by `(seed, name)` so a parameter's initial value
    /// does not depend on which other parameters exist.
    pub fn insert_init(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        seed: u64,
    ) -> Result<ParamId> {
        let name = name.into();
        let mut rng = named_rng(seed, &name);
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.insert(name, DenseTensor::from_vec(rows, cols, values)?)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &DenseTensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseTensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&DenseTensor> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// `(name, id)` pairs in lexicographic name order.
    pub fn sorted(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.index.iter().map(|(n, id)| (n.as_str(), *id))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(DenseTensor::len).sum()
    }

    pub fn num_scalars_matching(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| pred(n))
            .map(|(_, v)| v.len())
            .sum()
    }
}

/// Deterministic sub-stream generator keyed by a seed and a label.
pub fn named_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_bounded_and_keyed_by_name() {
        let mut a = ParamStore::new();
        let w = a.insert_init("w", 41, 5, 41, 3).unwrap();
        let bound = 1.0 / 41f64.sqrt();
        assert!(a.get(w).values().iter().all(|v| v.abs() <= bound));

        let mut b = ParamStore::new();
        b.insert_init("other", 2, 2, 2, 3).unwrap();
        let w2 = b.insert_init("w", 41, 5, 41, 3).unwrap();
        assert_eq!(a.get(w), b.get(w2));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", DenseTensor::zeros(1, 1)).unwrap();
        assert!(s.insert("a", DenseTensor::zeros(1, 1)).is_err());
    }
}
