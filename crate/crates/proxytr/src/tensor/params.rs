//! Named parameter storage shared across forward passes.
//!
//! Parameters live here between steps; each forward pass copies them into a
//! [`super::Graph`] as leaves. After backward, [`ParamStore::accumulate_grads`]
//! pulls the leaf gradients back, so gradients from several per-sample graphs
//! sum into one batch gradient.

use super::{Element, Graph};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Handle to one named parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub(crate) struct ParamEntry<E> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<E>,
    pub grad: Vec<E>,
    /// First/second moment state for the decoupled weight-decay optimizer.
    pub moment1: Vec<E>,
    pub moment2: Vec<E>,
}

pub struct ParamStore<E> {
    entries: Vec<ParamEntry<E>>,
    by_name: BTreeMap<String, usize>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<E>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() || n == 0 {
            return Err(Error::Domain(format!(
                "parameter {name:?}: data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            grad: vec![E::ZERO; data.len()],
            moment1: vec![E::ZERO; data.len()],
            moment2: vec![E::ZERO; data.len()],
            data,
        });
        Ok(id)
    }

    pub(crate) fn entry(&self, id: ParamId) -> &ParamEntry<E> {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn data(&self, id: ParamId) -> &[E] {
        &self.entries[id.0].data
    }

    pub fn grad(&self, id: ParamId) -> &[E] {
        &self.entries[id.0].grad
    }

    pub fn set_data(&mut self, id: ParamId, data: Vec<E>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if data.len() != e.data.len() {
            return Err(Error::ShapeMismatch {
                op: "set_data",
                lhs: e.shape.clone(),
                rhs: vec![data.len()],
            });
        }
        e.data = data;
        Ok(())
    }

    /// Ids in insertion order (the canonical checkpoint order).
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Nudge one scalar weight in place. Used by finite-difference checks.
    pub fn perturb(&mut self, id: ParamId, flat: usize, delta: E) {
        self.entries[id.0].data[flat] += delta;
    }

    /// Pull leaf gradients of `graph` into the store's accumulators.
    pub fn accumulate_grads(&mut self, graph: &Graph<E>) {
        for &(pid, tid) in graph.param_leaves() {
            if let Some(g) = graph.grad(tid) {
                let acc = &mut self.entries[pid.0].grad;
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad.iter_mut().for_each(|g| *g = E::ZERO);
        }
    }

    pub fn scale_grads(&mut self, factor: E) {
        for e in self.entries.iter_mut() {
            e.grad.iter_mut().for_each(|g| *g = *g * factor);
        }
    }

    pub fn max_abs_grad(&self) -> f64 {
        let mut m = 0f64;
        for e in &self.entries {
            for &g in &e.grad {
                m = m.max(g.to_f64().abs());
            }
        }
        m
    }

    /// Decoupled weight-decay adaptive-moment update. `step` is 1-based.
    pub fn adamw_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64, step: u64) {
        let bc1 = 1.0 - beta1.powi(step as i32);
        let bc2 = 1.0 - beta2.powi(step as i32);
        let b1 = E::from_f64(beta1);
        let b2 = E::from_f64(beta2);
        let one_m_b1 = E::from_f64(1.0 - beta1);
        let one_m_b2 = E::from_f64(1.0 - beta2);
        let lr_e = E::from_f64(lr);
        let decay = E::from_f64(lr * weight_decay);
        let eps_e = E::from_f64(eps);
        let inv_bc1 = E::from_f64(1.0 / bc1);
        let inv_bc2 = E::from_f64(1.0 / bc2);
        for e in self.entries.iter_mut() {
            for i in 0..e.data.len() {
                let g = e.grad[i];
                e.moment1[i] = b1 * e.moment1[i] + one_m_b1 * g;
                e.moment2[i] = b2 * e.moment2[i] + one_m_b2 * g * g;
                let m_hat = e.moment1[i] * inv_bc1;
                let v_hat = e.moment2[i] * inv_bc2;
                // Decoupled decay: shrink the weight, then apply the step.
                e.data[i] = e.data[i] - decay * e.data[i] - lr_e * m_hat / (v_hat.sqrt() + eps_e);
            }
        }
    }

    /// Optimizer state access for checkpointing, keyed like the weights.
    pub fn optimizer_state(&self, id: ParamId) -> (&[E], &[E]) {
        let e = &self.entries[id.0];
        (&e.moment1, &e.moment2)
    }

    pub fn set_optimizer_state(&mut self, id: ParamId, m1: Vec<E>, m2: Vec<E>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if m1.len() != e.data.len() || m2.len() != e.data.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state length mismatch for {:?}",
                e.name
            )));
        }
        e.moment1 = m1;
        e.moment2 = m2;
        Ok(())
    }
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        ParamStore::new()
    }
}
