use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stable handle to a parameter slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Named parameter storage. Removed slots stay as tombstones so handles held
/// elsewhere never alias a different tensor.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: Vec<Option<Param>>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Conflict(format!("parameter `{name}` already exists")));
        }
        let id = ParamId(self.slots.len());
        self.slots.push(Some(Param {
            name: name.clone(),
            value,
            requires_grad: true,
        }));
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Param> {
        let p = self.slots.get_mut(id.0)?.take()?;
        self.by_name.remove(&p.name);
        Some(p)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        self.slots[id.0]
            .as_ref()
            .unwrap_or_else(|| panic!("parameter slot {} was removed", id.0))
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        self.slots[id.0]
            .as_mut()
            .unwrap_or_else(|| panic!("parameter slot {} was removed", id.0))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.get(id).value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.get_mut(id).value
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.slots.get(id.0).is_some_and(|s| s.is_some())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn set_requires_grad(&mut self, id: ParamId, on: bool) {
        self.get_mut(id).requires_grad = on;
    }

    pub fn set_all_requires_grad(&mut self, on: bool) {
        for p in self.slots.iter_mut().flatten() {
            p.requires_grad = on;
        }
    }

    /// Live parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|p| (ParamId(i), p)))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.requires_grad).map(|(id, _)| id).collect()
    }

    pub fn total_count(&self) -> usize {
        self.iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(_, p)| p.requires_grad)
            .map(|(_, p)| p.value.len())
            .sum()
    }
}
