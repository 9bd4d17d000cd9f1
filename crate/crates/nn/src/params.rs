//! Named parameter storage with Adam moment buffers.

use std::collections::BTreeMap;

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Option<Vec<f64>>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// The trainable parameter set θ of one model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        let n = value.len();
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.entries[id.0].grad.as_deref()
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let e = &mut self.entries[id.0];
        match &mut e.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => e.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn has_grads(&self) -> bool {
        self.entries.iter().any(|e| e.grad.is_some())
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| e.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.entries.iter_mut().filter_map(|e| e.grad.as_mut()) {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }

    /// One bias-corrected Adam update over every parameter that holds a
    /// gradient, then clears the gradients. Parameters without a gradient are
    /// left untouched.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.has_grads() {
            return Err(NnError::MissingGrad);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for e in &mut self.entries {
            let Some(g) = e.grad.take() else { continue };
            let w = e.value.data_mut();
            for i in 0..g.len() {
                e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g[i];
                e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = e.m[i] / bc1;
                let vh = e.v[i] / bc2;
                w[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[1, 1])).unwrap();
        assert!(matches!(
            s.insert("w", Tensor::zeros(&[1, 1])),
            Err(NnError::DuplicateParam(_))
        ));
    }

    #[test]
    fn adam_without_grads_fails() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[1, 1])).unwrap();
        assert!(matches!(
            s.adam_step(&AdamConfig::default()),
            Err(NnError::MissingGrad)
        ));
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut s = ParamStore::new();
        let id = s
            .insert("w", Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        s.accumulate_grad(id, &[0.0, 0.0, 0.0]);
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.value(id).data(), &[0.5, -1.0, 2.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn quadratic_converges() {
        // minimize (w - 3)^2 with hand-computed gradient 2(w - 3)
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::scalar(-2.0)).unwrap();
        let cfg = AdamConfig::with_lr(0.1);
        for _ in 0..200 {
            let w = s.value(id).item();
            s.accumulate_grad(id, &[2.0 * (w - 3.0)]);
            s.adam_step(&cfg).unwrap();
        }
        assert!((s.value(id).item() - 3.0).abs() < 1e-3);
    }

    #[test]
    fn identical_stores_update_identically() {
        let mut a = ParamStore::new();
        let id = a
            .insert("w", Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap())
            .unwrap();
        let mut b = a.clone();
        for s in [&mut a, &mut b] {
            s.accumulate_grad(id, &[0.25, -4.0]);
            s.adam_step(&AdamConfig::default()).unwrap();
        }
        assert_eq!(a.value(id), b.value(id));
    }
}
