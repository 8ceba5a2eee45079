use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Grads, Graph, Var};
use crate::tensor::{Elem, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Elem> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    pub fn cast<U: Elem>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor<T>> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Overwrites every parameter from a name map; names and shapes must match exactly.
    pub fn load_map(&mut self, mut map: BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::CorruptModel(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::CorruptModel(format!(
                    "parameter {name}: checkpoint shape {} vs model {}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::CorruptModel(format!("checkpoint has unknown parameter {extra}")));
        }
        Ok(())
    }
}

/// Forward-pass context: binds parameters into a graph on first use.
pub struct Ctx<'a, T: Elem> {
    pub g: &'a Graph<T>,
    params: &'a ParamStore<T>,
    bound: RefCell<Vec<Option<Var>>>,
    trainable: bool,
}

impl<'a, T: Elem> Ctx<'a, T> {
    /// Parameters become gradient-collecting leaves.
    pub fn train(g: &'a Graph<T>, params: &'a ParamStore<T>) -> Self {
        Ctx { g, params, bound: RefCell::new(vec![None; params.len()]), trainable: true }
    }

    /// Parameters become constants; nothing is differentiated.
    pub fn infer(g: &'a Graph<T>, params: &'a ParamStore<T>) -> Self {
        Ctx { g, params, bound: RefCell::new(vec![None; params.len()]), trainable: false }
    }

    pub fn p(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let t = self.params.get(id).clone();
        let v = if self.trainable { self.g.leaf(t) } else { self.g.constant(t) };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients for every parameter touched in the forward pass (zeros elsewhere).
    pub fn param_grads(&self, grads: &mut Grads<T>) -> Vec<Tensor<T>> {
        let bound = self.bound.borrow();
        self.params
            .ids()
            .map(|id| {
                bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(self.params.get(id).shape()))
            })
            .collect()
    }
}

/// Kaiming-uniform with the PReLU gain for slope 0.25.
pub fn kaiming_uniform<T: Elem, R: Rng>(shape: Shape, rng: &mut R) -> Tensor<T> {
    let fan_in = (shape.c * shape.h * shape.w) as f64;
    let a = 0.25f64;
    let bound = (6.0 / ((1.0 + a * a) * fan_in)).sqrt();
    let data = (0..shape.numel()).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape")
}
