//! Named parameter storage shared by every layer of a model.
//!
//! Entries are either learnable (updated by the optimizer, counted as
//! parameters) or buffers such as batch-norm running statistics.

use std::collections::HashMap;
use std::path::Path;

use cafpn_tensor::archive::{self, DType};
use cafpn_tensor::Tensor;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub value: Tensor,
    pub learnable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

/// He-normal (fan-in) initialization.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, value: Tensor, learnable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            learnable,
        });
        ParamId(id)
    }

    pub fn learnable(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Entry {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "`{}` expects shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &Entry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn learnable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries()
            .filter(|(_, e)| e.learnable)
            .map(|(id, _)| id)
    }

    /// Number of learnable scalars.
    pub fn count_learnable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.learnable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Learnable scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.learnable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        archive::save_named(
            path,
            self.entries.iter().map(|e| (e.name.as_str(), &e.value)),
            DType::F64,
        )?;
        Ok(())
    }

    /// Replaces every entry from a checkpoint. The checkpoint must hold
    /// exactly this store's names with matching shapes.
    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let records = archive::load_named(path)?;
        self.assign_records(records)
    }

    pub fn assign_records(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        if records.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                records.len(),
                self.entries.len()
            )));
        }
        for (name, value) in records {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Config(format!("unknown checkpoint tensor `{name}`")))?;
            self.set(id, value)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_only_learnable_entries() {
        let mut s = ParamStore::new();
        s.learnable("a/w", Tensor::zeros(&[3, 4]));
        s.buffer("a/running_mean", Tensor::zeros(&[4]));
        s.learnable("b/w", Tensor::zeros(&[5]));
        assert_eq!(s.count_learnable(), 17);
        assert_eq!(s.count_prefix("a/"), 12);
        assert_eq!(s.learnable_ids().count(), 2);
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut s = ParamStore::new();
        let id = s.learnable("w", Tensor::zeros(&[2]));
        assert!(s.set(id, Tensor::zeros(&[3])).is_err());
        s.set(id, Tensor::ones(&[2])).unwrap();
        assert_eq!(s.get(id).data(), &[1.0, 1.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.tnsr");
        let mut s = ParamStore::new();
        s.learnable("x/w", Tensor::from_vec(&[2], vec![0.1, -3.0]).unwrap());
        s.buffer("x/rv", Tensor::ones(&[1]));
        s.save(&path).unwrap();
        let mut t = s.clone();
        t.set(t.id("x/w").unwrap(), Tensor::zeros(&[2])).unwrap();
        t.load(&path).unwrap();
        assert_eq!(t.by_name("x/w"), s.by_name("x/w"));

        let mut other = ParamStore::new();
        other.learnable("y/w", Tensor::zeros(&[2]));
        other.buffer("x/rv", Tensor::ones(&[1]));
        assert!(other.load(&path).is_err());
    }
}
