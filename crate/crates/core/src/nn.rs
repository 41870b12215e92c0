//! Parameter storage, equalized-learning-rate layers and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::{numel, Tensor};

/// Named parameters, iterated in name order so that every traversal (init,
/// checkpointing, optimizer updates) is deterministic.
#[derive(Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) {
        self.map.insert(name.to_string(), Tensor::leaf(data, shape));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Replaces the value of an existing parameter with a fresh leaf.
    pub fn set(&mut self, name: &str, data: Vec<f64>) {
        let shape = self.get(name).shape().to_vec();
        self.insert(name, data, &shape);
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.map.keys().filter(|k| k.starts_with(prefix)).cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

pub fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Conv weight (Co,Ci,k,k) ~ N(0,1) and zero bias; the He scale is applied
/// at runtime.
pub fn init_conv(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c_out: usize, c_in: usize, k: usize) {
    let shape = [c_out, c_in, k, k];
    store.insert(&format!("{name}.w"), gaussian(rng, numel(&shape)), &shape);
    store.insert(&format!("{name}.b"), vec![0.0; c_out], &[c_out]);
}

/// Dense weight stored as (in, out). `zero` gives an all-zero weight.
pub fn init_dense(store: &mut ParamStore, rng: &mut impl Rng, name: &str, n_in: usize, n_out: usize, zero: bool) {
    let w = if zero { vec![0.0; n_in * n_out] } else { gaussian(rng, n_in * n_out) };
    store.insert(&format!("{name}.w"), w, &[n_in, n_out]);
    store.insert(&format!("{name}.b"), vec![0.0; n_out], &[n_out]);
}

/// Convolution with equalized learning rate: weights are scaled by
/// `gain / sqrt(fan_in)` on every forward pass.
pub fn conv(store: &ParamStore, name: &str, x: &Tensor, gain: f64) -> Tensor {
    let w = store.get(&format!("{name}.w"));
    let b = store.get(&format!("{name}.b"));
    let (c_out, c_in, k) = (w.dim(0), w.dim(1), w.dim(2));
    let scale = gain / ((c_in * k * k) as f64).sqrt();
    x.conv2d(&w.mul_scalar(scale), k / 2).add(&b.reshape(&[1, c_out, 1, 1]))
}

/// Dense layer with equalized learning rate; x is (N, in).
pub fn dense(store: &ParamStore, name: &str, x: &Tensor, gain: f64) -> Tensor {
    let w = store.get(&format!("{name}.w"));
    let b = store.get(&format!("{name}.b"));
    let scale = gain / (w.dim(0) as f64).sqrt();
    x.matmul(&w.mul_scalar(scale)).add(b)
}

/// Dense layer without runtime weight scaling.
pub fn dense_plain(store: &ParamStore, name: &str, x: &Tensor) -> Tensor {
    let w = store.get(&format!("{name}.w"));
    let b = store.get(&format!("{name}.b"));
    x.matmul(w).add(b)
}

/// Normalizes each pixel's feature vector to unit average square (channel axis 1).
pub fn pixel_norm(x: &Tensor) -> Tensor {
    let ms = x.square().mean_keepdim(&[1]).add_scalar(1e-8);
    x.mul(&ms.powf(-0.5))
}

/// Appends one channel holding the average (over features) of the per-feature
/// standard deviation across the batch.
pub fn minibatch_stddev(x: &Tensor) -> Tensor {
    let [n, _c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let centered = x.sub(&x.mean_keepdim(&[0]));
    let std = centered.square().mean_keepdim(&[0]).add_scalar(1e-8).sqrt();
    let s = std.mean_all();
    let channel = s.reshape(&[1, 1, 1, 1]).broadcast_to(&[n, 1, h, w]);
    Tensor::concat(&[x.clone(), channel], 1)
}

pub const LRELU_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Adam with per-parameter step counts, so parameters added by a grow step
/// get correct bias correction from their first update.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    pub slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, slots: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, names: &[String], grads: &[Tensor]) {
        assert_eq!(names.len(), grads.len());
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (name, g) in names.iter().zip(grads) {
            let p = store.get(name);
            let n = p.numel();
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - beta1.powi(slot.t as i32);
            let bc2 = 1.0 - beta2.powi(slot.t as i32);
            let mut data = p.to_vec();
            for (i, (&gi, x)) in g.data().iter().zip(data.iter_mut()).enumerate() {
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * gi;
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * gi * gi;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
            store.set(name, data);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pixel_norm_gives_unit_mean_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_vec(gaussian(&mut rng, 2 * 5 * 3 * 3), &[2, 5, 3, 3]);
        let y = pixel_norm(&x);
        let ms = y.square().mean_keepdim(&[1]);
        for v in ms.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn minibatch_stddev_adds_constant_channel() {
        let x = Tensor::from_vec(vec![0.0, 2.0], &[2, 1, 1, 1]);
        let y = minibatch_stddev(&x);
        assert_eq!(y.shape(), &[2, 2, 1, 1]);
        assert!((y.data()[1] - 1.0).abs() < 1e-6);
        assert!((y.data()[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", vec![3.0, -2.0], &[2]);
        let mut opt = Adam::new(AdamConfig { lr: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
        let names = vec!["x".to_string()];
        for _ in 0..500 {
            let x = store.get("x").clone();
            let loss = x.square().sum_all();
            let g = grad(&loss, &[&x], false);
            opt.step(&mut store, &names, &g);
        }
        for v in store.get("x").data() {
            assert!(v.abs() < 1e-2, "{v}");
        }
    }
}
