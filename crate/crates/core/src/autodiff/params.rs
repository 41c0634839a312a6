//! Named parameter storage and per-step binding onto a [`Tape`].

use std::collections::HashMap;

use super::tape::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, uniquely named tensors. Names follow `block.index.kind`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name: parameter layouts are fixed by model code.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Named copies in insertion order, ready for a checkpoint.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Overwrite every parameter from `named`. Every parameter must be present
    /// with an identical shape; all offending names are reported together.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut problems = Vec::new();
        for (name, current) in self.names.iter().zip(&self.tensors) {
            match lookup.get(name.as_str()) {
                None => problems.push(format!("{name}: missing")),
                Some(t) if t.shape() != current.shape() => problems.push(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    current.shape()
                )),
                Some(_) => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::shape("load_params", problems.join("; ")));
        }
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            *slot = lookup[name.as_str()].clone();
        }
        Ok(())
    }
}

impl ParamStore {
    /// Copy every tensor of `named` whose name and shape match a parameter
    /// here. Returns the names of parameters left untouched, in order.
    pub fn copy_matching(&mut self, named: &[(String, Tensor)]) -> Vec<String> {
        let lookup: HashMap<&str, &Tensor> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut untouched = Vec::new();
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            match lookup.get(name.as_str()) {
                Some(t) if t.shape() == slot.shape() => *slot = (*t).clone(),
                _ => untouched.push(name.clone()),
            }
        }
        untouched
    }
}

/// A tape plus lazily bound parameters for one forward/backward pass.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Graph<'p> {
    /// Parameters are bound as gradient-carrying leaves.
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { tape: Tape::new(), params, bound: vec![None; params.len()], trainable: true }
    }

    /// Parameters are bound as constants; nothing needs a gradient.
    pub fn inference(params: &'p ParamStore) -> Self {
        Graph { trainable: false, ..Self::new(params) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = if self.trainable { self.tape.leaf(value) } else { self.tape.constant(value) };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Backpropagate from `loss`; returns one entry per parameter (None when
    /// the parameter was not used).
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let mut grads: Grads = self.tape.backward(loss)?;
        Ok(self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect())
    }
}
