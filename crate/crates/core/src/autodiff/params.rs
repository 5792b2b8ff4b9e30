use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;

/// Named parameters in a stable (sorted) order, with a frozen subset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Gaussian init with the given standard deviation.
    pub fn init_normal<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        self.insert(name, Tensor::matrix(rows, cols, data));
    }

    pub fn init_const(&mut self, name: &str, rows: usize, cols: usize, v: f64) {
        self.insert(name, Tensor::matrix(rows, cols, vec![v; rows * cols]));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.contains(name)
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<String> = self.tensors.keys().filter(|n| n.starts_with(prefix)).cloned().collect();
        self.frozen.extend(names);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Moves every tensor under `prefix` from `other` into `self`.
    pub fn merge_prefixed(&mut self, other: &ParamStore, prefix: &str) {
        for (n, t) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.insert(n.clone(), t.clone());
        }
    }

    /// Hex SHA-256 over names, shapes, and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in &self.tensors {
            h.update(n.as_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: Some(1.0) }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that has a gradient.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Vec<f64>)]) -> f64 {
        let norm = grads.iter().flat_map(|(_, g)| g.iter()).map(|g| g * g).sum::<f64>().sqrt();
        let clip = match self.config.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let Some(t) = store.get_mut(name) else { continue };
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                let gi = g[i] * clip;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                t.data[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig { lr: 0.05, clip: None, ..Default::default() });
        for _ in 0..500 {
            let mut g = Graph::new();
            let w = g.param(&store, "w");
            let q = g.sum_sq_rows(w);
            let l = g.mean_all(q);
            g.backward(l);
            opt.step(&mut store, &g.param_grads());
        }
        assert!(store.get("w").unwrap().data.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut store = ParamStore::new();
        store.insert("enc.w", Tensor::row(vec![1.0]));
        store.insert("dec.w", Tensor::row(vec![1.0]));
        store.freeze_prefix("enc.");
        let before = store.get("enc.w").unwrap().clone();
        let mut g = Graph::new();
        let a = g.param(&store, "enc.w");
        let b = g.param(&store, "dec.w");
        let s = g.mul(a, b);
        let l = g.mean_all(s);
        g.backward(l);
        let grads = g.param_grads();
        assert_eq!(grads.len(), 1);
        Adam::new(AdamConfig::default()).step(&mut store, &grads);
        assert_eq!(store.get("enc.w").unwrap(), &before);
        assert_ne!(store.get("dec.w").unwrap().data[0], 1.0);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut a = ParamStore::new();
        a.insert("x", Tensor::row(vec![1.0, 2.0]));
        let c = a.checksum();
        assert_eq!(c, a.clone().checksum());
        a.get_mut("x").unwrap().data[1] = 2.0 + 1e-15;
        assert_ne!(c, a.checksum());
    }
}
