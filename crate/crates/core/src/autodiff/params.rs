//! Named parameter storage and first-order optimizers.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::math::sqrt;

pub type ParamId = usize;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.names.push(name.to_string());
        self.values.push(value);
        self.values.len() - 1
    }

    /// Glorot-normal initialised `rows × cols` weight.
    pub fn add_glorot<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let std = sqrt(2.0 / (rows + cols) as f64);
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor { rows, cols, data })
    }

    pub fn add_normal<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor { rows, cols, data })
    }

    pub fn add_filled(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Tensor::filled(rows, cols, v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.values)
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Overwrite values from `(name, tensor)` pairs; names and shapes must
    /// match exactly.
    pub fn load<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, Tensor)>) -> Result<()> {
        for (name, t) in entries {
            let id = self.id(name)?;
            if self.values[id].shape() != t.shape() {
                return Err(Error::ShapeMismatch(alloc::format!("parameter {name}")));
            }
            self.values[id] = t;
        }
        Ok(())
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.velocity.resize(store.len(), None);
        for (&id, g) in &grads.by_param {
            let v = self.velocity[id].get_or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let p = store.value_mut(id);
            for k in 0..g.len() {
                v.data[k] = self.momentum * v.data[k] + g.data[k];
                p.data[k] -= self.lr * v.data[k];
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        self.t += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (&id, g) in &grads.by_param {
            let m = self.m[id].get_or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let v = self.v[id].get_or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let p = store.value_mut(id);
            for k in 0..g.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / c1;
                let vh = v.data[k] / c2;
                p.data[k] -= self.lr * mh / (sqrt(vh) + self.eps);
            }
        }
    }
}

/// Either optimizer behind one interface.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        match self {
            Optimizer::Sgd(o) => o.step(store, grads),
            Optimizer::Adam(o) => o.step(store, grads),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.lr = lr,
            Optimizer::Adam(o) => o.lr = lr,
        }
    }
}
