use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::graph::{BnUpdate, Gradients, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// `None` until a backward pass (or an explicit assignment) provides one.
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

/// Named parameter set of one model instance. Insertion order is the
/// checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(name, "duplicate parameter name"));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            trainable,
        });
        Ok(id)
    }

    /// Kaiming-normal initialized weight with fan-in `fan_in`.
    pub fn add_kaiming(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let std = (2.0 / fan_in as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        });
        self.add(name, value, true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Number of trainable scalar values.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Adds the parameter gradients of a finished backward pass. Trainable
    /// parameters the graph never touched receive an explicit zero gradient.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for (pid, node) in graph.param_nodes() {
            if let Some(g) = grads.get(node) {
                let p = &mut self.params[pid.0];
                match &mut p.grad {
                    Some(acc) => acc.add_assign(g),
                    None => p.grad = Some(g.clone()),
                }
            }
        }
        for p in &mut self.params {
            if p.trainable && p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }

    /// Applies running-statistics updates recorded by training-mode batch norms.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate<T>>, momentum: T) {
        let keep = T::one() - momentum;
        for u in updates {
            let rm = self.params[u.running_mean.0].value.data_mut();
            for (r, &m) in rm.iter_mut().zip(&u.batch_mean) {
                *r = keep * *r + momentum * m;
            }
            let rv = self.params[u.running_var.0].value.data_mut();
            for (r, &v) in rv.iter_mut().zip(&u.batch_var) {
                *r = keep * *r + momentum * v;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Same names, shapes and values in another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
