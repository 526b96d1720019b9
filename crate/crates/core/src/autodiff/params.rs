use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors of a model set.
///
/// Names are dotted paths; the segment before the first dot is the parameter
/// group (`encoder1.layer0.wq` belongs to `encoder1`). Freezing works on groups.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        let mut tensor = tensor.with_requires_grad(true);
        tensor.zero_grad();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
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
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Sorted set of group names.
    pub fn groups(&self) -> BTreeSet<String> {
        self.names.iter().map(|n| group_of(n).to_string()).collect()
    }

    pub fn group_ids(&self, group: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, n, _)| group_of(n) == group)
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Marks every tensor of `group` as trainable or frozen.
    pub fn set_group_trainable(&mut self, group: &str, trainable: bool) -> Result<()> {
        let ids = self.group_ids(group);
        if ids.is_empty() {
            return Err(Error::Config(format!("unknown parameter group {group}")));
        }
        for id in ids {
            let t = &mut self.tensors[id.0];
            t.set_requires_grad(trainable);
            t.zero_grad();
        }
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.tensors[id.0].requires_grad()
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad())
            .map(|t| t.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Adds `scale ·` every parameter gradient found in `grads`.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        for (id, g) in grads.params() {
            let t = &mut self.tensors[id.0];
            if t.requires_grad() {
                t.accumulate_grad(g, scale)?;
            }
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for t in &mut self.tensors {
                if let Some(g) = t.grad_mut() {
                    g.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        norm
    }

    /// SHA-256 over names, shapes and raw value bits of one group.
    pub fn group_hash(&self, group: &str) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.iter().filter(|(_, n, _)| group_of(n) == group) {
            h.update(name.as_bytes());
            h.update(t.to_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Copies of all parameter values, in id order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.data().to_vec()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        if snapshot.len() != self.tensors.len() {
            return Err(Error::Dimension("snapshot size mismatch".into()));
        }
        for (t, s) in self.tensors.iter_mut().zip(snapshot) {
            t.set_data(s.clone())?;
        }
        Ok(())
    }

    /// Writes every parameter as `<name>.ftsr` plus a `params.json` name list.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            t.save(dir.join(format!("{name}.ftsr")))?;
        }
        std::fs::write(dir.join("params.json"), serde_json::to_vec_pretty(&self.names)?)?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let names: Vec<String> = serde_json::from_slice(&std::fs::read(dir.join("params.json"))?)?;
        let mut store = Self::new();
        for name in names {
            if name.contains('/') || name.contains("..") {
                return Err(Error::Format(format!("bad parameter name {name:?}")));
            }
            let t = Tensor::load(dir.join(format!("{name}.ftsr")))?;
            store.add(name, t)?;
        }
        Ok(store)
    }

    /// Replaces values by name from `other`; used when loading checkpoints.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in other.names.iter().zip(&other.tensors) {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Config(format!("checkpoint has unknown parameter {name}")))?;
            let dst = &mut self.tensors[id.0];
            if dst.shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.set_data(t.data().to_vec())?;
        }
        Ok(())
    }
}
