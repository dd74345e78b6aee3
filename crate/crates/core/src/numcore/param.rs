use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Tensor,
}

/// Owns every parameter of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

/// Per-parameter gradients produced by one backward pass, indexed like the
/// store that the graph was built against.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SavedParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    params: Vec<SavedParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.by_name(&name).is_none(), "duplicate parameter name {name}");
        let grad = Tensor::zeros(tensor.shape());
        self.params.push(Parameter { name, tensor, grad });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }

    /// Plain gradient descent: `w -= lr * grad`.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in &mut self.params {
            for (w, g) in p.tensor.data_mut().iter_mut().zip(p.grad.data()) {
                *w -= lr * g;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().flat_map(|p| p.grad.data()).map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g *= factor;
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            params: self
                .params
                .iter()
                .map(|p| SavedParam {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    /// Overwrites parameter values from a checkpoint produced by
    /// [`ParamStore::to_json`]. Every parameter in `self` must be present with
    /// the same shape; extra checkpoint entries are ignored.
    pub fn load_json(&mut self, text: &str) -> Result<()> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        let mut problems = Vec::new();
        let mut updates = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            match ck.params.iter().find(|s| s.name == p.name) {
                None => problems.push(format!("{} missing (expected {:?})", p.name, p.tensor.shape())),
                Some(s) if s.shape != p.tensor.shape() => {
                    problems.push(format!("{}: checkpoint {:?} vs model {:?}", p.name, s.shape, p.tensor.shape()))
                }
                Some(s) => updates.push((i, Tensor::new(&s.shape, s.data.clone())?)),
            }
        }
        if !problems.is_empty() {
            return Err(Error::IncompatibleCheckpoint(problems));
        }
        for (i, t) in updates {
            self.params[i].tensor = t;
        }
        Ok(())
    }
}
