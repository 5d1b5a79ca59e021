//! Named parameter storage with Adam optimizer state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Tensor,
    second: Tensor,
}

/// Parameters keyed by name. Iteration order is the sorted key order, which
/// keeps every reduction over parameters deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

pub type Grads = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(values: BTreeMap<String, Tensor>) -> Self {
        let mut store = ParamStore::new();
        for (k, v) in values {
            store.insert(k, v);
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.moments.insert(
            name.clone(),
            Moments {
                first: Tensor::zeros(value.shape()),
                second: Tensor::zeros(value.shape()),
            },
        );
        self.values.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.values.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Tensor::numel).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Clears moments and the step counter, keeping parameter values.
    pub fn reset_optimizer(&mut self) {
        for (name, m) in self.moments.iter_mut() {
            let shape = self.values[name].shape().to_vec();
            m.first = Tensor::zeros(&shape);
            m.second = Tensor::zeros(&shape);
        }
        self.step = 0;
    }

    pub fn zero_grads(&self) -> Grads {
        self.values
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect()
    }

    /// One bias-corrected Adam update. `grads` must have exactly the
    /// store's keys with matching shapes.
    pub fn adam_step(&mut self, grads: &Grads, cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.values.len() || grads.keys().ne(self.values.keys()) {
            let missing: Vec<_> = self
                .values
                .keys()
                .filter(|k| !grads.contains_key(*k))
                .chain(grads.keys().filter(|k| !self.values.contains_key(*k)))
                .cloned()
                .collect();
            return Err(Error::KeyMismatch(missing.join(", ")));
        }
        for (name, g) in grads {
            if g.shape() != self.values[name].shape() {
                return Err(Error::shape("adam_step", self.values[name].shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("adam_step gradient"));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let value = self.values.get_mut(name).expect("checked above");
            let m = self.moments.get_mut(name).expect("moments track values");
            let (w, m1, m2) = (value.data_mut(), m.first.data_mut(), m.second.data_mut());
            for i in 0..w.len() {
                let gi = g.data()[i];
                m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * gi;
                m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = m1[i] / bc1;
                let vhat = m2[i] / bc2;
                w[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row_vector(values.to_vec()));
        s
    }

    fn grads(values: &[f64]) -> Grads {
        [("w".to_string(), Tensor::row_vector(values.to_vec()))].into()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(&[0.5, -1.0]);
        for _ in 0..10 {
            s.adam_step(&grads(&[0.0, 0.0]), &AdamConfig::default()).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data(), &[0.5, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[0.0, 0.0]);
        s.adam_step(&grads(&[3.0, -0.2]), &AdamConfig::default()).unwrap();
        let w = s.get("w").unwrap().data();
        assert!((w[0] + 1e-3).abs() < 1e-10);
        assert!((w[1] - 1e-3).abs() < 1e-9);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn converges_on_quadratic() {
        let target = [0.3, -0.7];
        let mut s = store(&[0.0, 0.0]);
        let cfg = AdamConfig::with_lr(1e-2);
        for _ in 0..200 {
            let w = s.get("w").unwrap().data().to_vec();
            let g: Vec<f64> = w.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            s.adam_step(&grads(&g), &cfg).unwrap();
        }
        let w = s.get("w").unwrap().data();
        let dist = ((w[0] - target[0]).powi(2) + (w[1] - target[1]).powi(2)).sqrt();
        assert!(dist < 1e-2, "distance {dist}");
    }

    #[test]
    fn key_mismatch_is_an_error() {
        let mut s = store(&[0.0]);
        let bad: Grads = [("v".to_string(), Tensor::row_vector(vec![1.0]))].into();
        assert!(matches!(
            s.adam_step(&bad, &AdamConfig::default()),
            Err(Error::KeyMismatch(_))
        ));
    }
}
