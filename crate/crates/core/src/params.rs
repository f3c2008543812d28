//! Named parameter storage shared by the surrogate and the editor.

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};
use crate::numerics::blob;
use crate::numerics::{Adam, Grads, Graph, OptimizerState, Tensor, Var};
use crate::scalar::Scalar;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of named tensors. Insertion order is the canonical
/// order for optimiser state and serialisation.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    frozen: bool,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// The store's tensors registered as graph leaves, indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            frozen: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.add_with(name, tensor, true)
    }

    pub fn add_with(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar elements in trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Registers every tensor in `g`; only trainable tensors of an unfrozen
    /// store become differentiable leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(&p.tensor, p.trainable && !self.frozen))
            .collect();
        Bound { vars }
    }

    /// Registers every tensor as a constant.
    pub fn bind_constant(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.constant(&p.tensor)).collect(),
        }
    }

    /// Gradients of the trainable tensors in store order (zeros if unused).
    pub fn collect_grads(&self, bound: &Bound, grads: &Grads<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .filter(|(p, _)| p.trainable)
            .map(|(p, &v)| grads.get_or_zeros(v, &p.tensor))
            .collect()
    }

    pub fn new_optimizer_state(&self) -> OptimizerState<T> {
        let ps: Vec<&Tensor<T>> = self.params.iter().filter(|p| p.trainable).map(|p| &p.tensor).collect();
        OptimizerState::new(&ps)
    }

    /// One optimiser update over the trainable tensors. Refused when frozen.
    pub fn apply(&mut self, adam: &Adam, grads: &[Tensor<T>], state: &mut OptimizerState<T>) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen("attempted optimiser update on frozen parameters".into()));
        }
        let mut ps: Vec<&mut Tensor<T>> = self
            .params
            .iter_mut()
            .filter(|p| p.trainable)
            .map(|p| &mut p.tensor)
            .collect();
        adam.step(&mut ps, grads, state)
    }

    pub fn trainable_tensors(&self) -> Vec<Tensor<T>> {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.clone()).collect()
    }

    /// Replaces trainable tensors in store order.
    pub fn set_trainable_tensors(&mut self, values: &[Tensor<T>]) -> Result<()> {
        let mut it = values.iter();
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let v = it
                .next()
                .ok_or_else(|| Error::Contract("too few tensors".into()))?;
            if v.shape() != p.tensor.shape() {
                return Err(Error::shape("set_trainable_tensors", p.tensor.shape(), v.shape()));
            }
            p.tensor = v.clone();
        }
        Ok(())
    }

    /// Same names and tensors converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            frozen: self.frozen,
        }
    }

    pub fn named(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        self.params.iter().map(|p| (p.name.clone(), &p.tensor))
    }

    pub fn save<H: Serialize>(&self, path: &Path, kind: &str, header: H) -> Result<()> {
        blob::save_named(path, kind, header, self.named())
    }

    /// Loads tensors by name into a store with an identical layout.
    pub fn load_into<H: DeserializeOwned>(&mut self, path: &Path, kind: &str) -> Result<H> {
        let (header, tensors) = blob::load_named::<T, H>(path, kind)?;
        self.assign_named(tensors, path)?;
        Ok(header)
    }

    pub fn assign_named(&mut self, tensors: Vec<(String, Tensor<T>)>, path: &Path) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("expected {} tensors, found {}", self.params.len(), tensors.len()),
            });
        }
        for (p, (name, t)) in self.params.iter_mut().zip(tensors) {
            if p.name != name || p.tensor.shape() != t.shape() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("tensor {name} {:?} does not match {} {:?}", t.shape(), p.name, p.tensor.shape()),
                });
            }
            p.tensor = t;
        }
        Ok(())
    }
}
