use std::collections::BTreeMap;

use rand::Rng;

use super::float::Float;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors keyed by layer path, e.g. `g_rm.down1.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        ParamStore { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn init_normal<R: Rng + ?Sized>(&mut self, name: String, shape: &[usize], std: f64, rng: &mut R) {
        self.tensors.insert(name, Tensor::randn(shape, std, rng));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    /// Fails unless `other` holds exactly the same names with the same shapes.
    pub fn check_same_layout(&self, other: &ParamStore<T>) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        Ok(())
    }
}
