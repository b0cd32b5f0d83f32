use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Graph handles for every parameter of a store, valid for one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf of `g`.
    pub fn attach(&self, g: &mut Graph) -> Bound {
        let vars = self.tensors.iter().map(|t| g.leaf(t.clone())).collect();
        Bound { vars, index: self.index.clone() }
    }

    /// Records every parameter as a constant of `g` (inference only).
    pub fn attach_frozen(&self, g: &mut Graph) -> Bound {
        let vars = self.tensors.iter().map(|t| g.constant(t.clone())).collect();
        Bound { vars, index: self.index.clone() }
    }

    /// Copies leaf gradients out of `g`, replacing any previous gradients.
    pub fn collect_grads(&mut self, g: &Graph, bound: &Bound) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            match g.grad(v) {
                Some(grad) => t.set_grad(grad.to_vec())?,
                None => t.clear_grad(),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    pub fn grad_norm(&self) -> Result<f64> {
        let mut s = 0.0;
        for (name, t) in self.iter() {
            let g = t
                .grad()
                .ok_or_else(|| Error::Contract(format!("parameter `{name}` has no gradient")))?;
            s += g.iter().map(|v| v * v).sum::<f64>();
        }
        Ok(s.sqrt())
    }
}

/// Global-norm gradient clipping threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradClip(pub f64);

impl GradClip {
    fn factor(self, norm: f64) -> f64 {
        if norm > self.0 {
            self.0 / norm
        } else {
            1.0
        }
    }
}

pub trait Optimizer {
    /// Applies one update from the gradients currently held by `params`.
    fn step(&mut self, params: &mut ParamStore) -> Result<()>;
}

/// Plain gradient descent: `p ← p − lr · clip(grad)`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub clip: Option<GradClip>,
}

impl Sgd {
    pub fn new(lr: f64, clip: Option<GradClip>) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
        }
        if let Some(GradClip(c)) = clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("gradient clip must be positive, got {c}")));
            }
        }
        Ok(Self { lr, clip })
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let norm = params.grad_norm()?;
        let factor = self.clip.map_or(1.0, |c| c.factor(norm));
        let step = self.lr * factor;
        for (_, t) in params.iter_mut() {
            let g = t.grad().expect("checked by grad_norm").to_vec();
            t.data_mut().iter_mut().zip(&g).for_each(|(p, gv)| *p -= step * gv);
        }
        Ok(())
    }
}

/// Adam with bias correction and the same global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<GradClip>,
    t: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, clip: Option<GradClip>) -> Result<Self> {
        Sgd::new(lr, clip)?;
        Ok(Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip, t: 0, moments: Vec::new() })
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let norm = params.grad_norm()?;
        let factor = self.clip.map_or(1.0, |c| c.factor(norm));
        if self.moments.is_empty() {
            self.moments =
                params.iter().map(|(_, t)| (vec![0.0; t.len()], vec![0.0; t.len()])).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((_, t), (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            let g = t.grad().expect("checked by grad_norm").to_vec();
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let gi = g[i] * factor;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *p -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
