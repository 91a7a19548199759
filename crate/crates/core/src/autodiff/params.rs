use std::collections::HashMap;

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Precision, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// FNV-1a over names, shapes and bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, v) in self.names.iter().zip(&self.values) {
            eat(name.as_bytes());
            for d in v.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for x in v.data() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Round every value to the given precision.
    pub fn round_to(&mut self, precision: Precision) {
        for v in &mut self.values {
            precision.round_all(v.data_mut());
        }
    }

    /// Put every parameter on `g`; `trainable` decides which receive gradients.
    pub fn bind(&self, g: &Graph, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| {
                if trainable(n) {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        Binding { vars }
    }
}

/// Graph variables for every entry of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Binding over variables already on a graph, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order; `None` for frozen or unused parameters.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| grads.take(*v)).collect()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            steps: Vec::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], precision: Precision) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
            self.steps.resize(store.len(), 0);
        }
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let n = g.len();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; n]);
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let p = store.values[i].data_mut();
            for k in 0..n {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let upd = self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                p[k] = precision.round(p[k] - upd);
            }
        }
    }
}

/// Plain gradient descent.
pub fn sgd_step(store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, precision: Precision) {
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        for (p, d) in store.values[i].data_mut().iter_mut().zip(g.data()) {
            *p = precision.round(*p - lr * d);
        }
    }
}
