//! Named flat views over parameter sets, shared by the optimizer,
//! checkpoints, hashing and gradient checks.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{validation, Result};

pub type TensorList<'a> = Vec<(String, &'a [f64])>;
pub type TensorListMut<'a> = Vec<(String, &'a mut [f64])>;

pub trait Parameters: Sized {
    /// Trainable tensors in a fixed order.
    fn tensors(&self) -> TensorList<'_>;
    fn tensors_mut(&mut self) -> TensorListMut<'_>;
    /// Same shapes, all zeros (gradient accumulator).
    fn zeros_like(&self) -> Self;

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn scale(&mut self, k: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }

    /// SHA-256 over tensor names and little-endian f64 values.
    fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Value at a flat index across all tensors.
    fn get_flat(&self, mut idx: usize) -> f64 {
        for (_, t) in self.tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("flat parameter index out of range")
    }

    fn set_flat(&mut self, mut idx: usize, value: f64) {
        for (_, t) in self.tensors_mut() {
            if idx < t.len() {
                t[idx] = value;
                return;
            }
            idx -= t.len();
        }
        panic!("flat parameter index out of range")
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Parameters for super::mlp::Mlp {
    fn tensors(&self) -> TensorList<'_> {
        super::mlp::Mlp::tensors(self)
    }

    fn tensors_mut(&mut self) -> TensorListMut<'_> {
        super::mlp::Mlp::tensors_mut(self)
    }

    fn zeros_like(&self) -> Self {
        super::mlp::Mlp::zeros_like(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(validation("lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(validation("adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(validation("adam eps must be > 0 and weight_decay >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: Parameters>(cfg: AdamConfig, params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
        Self {
            cfg,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let grads = grads.tensors();
        for (k, (_, p)) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[k].1;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g[i] + c.weight_decay * p[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                p[i] -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::mlp::Mlp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = Mlp::init(&[2, 1], &mut ChaCha8Rng::seed_from_u64(1));
        let before = p.clone();
        let mut g = p.zeros_like();
        g.layers[0].w[[0, 0]] = 3.0;
        g.layers[0].w[[0, 1]] = -0.01;
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &p);
        opt.step(&mut p, &g);
        let d0 = p.layers[0].w[[0, 0]] - before.layers[0].w[[0, 0]];
        let d1 = p.layers[0].w[[0, 1]] - before.layers[0].w[[0, 1]];
        assert!((d0 + 0.1).abs() < 1e-6 && (d1 - 0.1).abs() < 1e-4);
        assert_eq!(p.layers[0].b, before.layers[0].b);
    }

    #[test]
    fn flat_access_and_hash() {
        let mut p = Mlp::init(&[3, 2], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(p.n_params(), 8);
        let h = p.hash_hex();
        p.set_flat(7, 0.5);
        assert_eq!(p.get_flat(7), 0.5);
        assert_ne!(h, p.hash_hex());
        assert_eq!(h.len(), 64);
    }
}
