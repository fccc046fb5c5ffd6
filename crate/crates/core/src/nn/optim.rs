use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter, and a
/// parameter's bias correction counts only the steps it was trainable for.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub(crate) first: Vec<Tensor>,
    pub(crate) second: Vec<Tensor>,
    pub(crate) steps: Vec<u64>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = |id| {
            let (r, c) = store.value(id).shape();
            Tensor::zeros(r, c)
        };
        Self {
            config,
            first: store.ids().map(zeros).collect(),
            second: store.ids().map(zeros).collect(),
            steps: vec![0; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f32) {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let decay = if store.decays(id) { weight_decay } else { 0.0 };
            let grad = store.grad(id).data().to_vec();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let w = store.value_mut(id).data_mut();
            for k in 0..w.len() {
                let g = grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                w[k] -= lr * (mhat / (vhat.sqrt() + eps) + decay * w[k]);
            }
        }
    }
}

/// Rescales trainable gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm.is_finite() {
        let factor = (max_norm / norm) as f32;
        for id in store.ids().collect::<Vec<_>>() {
            if store.is_trainable(id) {
                store.grad_mut(id).scale(factor);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_weight_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(1, 3, vec![1.0, -1.0, 0.5]), false);
        store
            .grad_mut(id)
            .data_mut()
            .copy_from_slice(&[2.0, -0.1, 0.0]);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        opt.step(&mut store, 0.1);
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-5);
        assert!((w[1] + 0.9).abs() < 1e-5);
        assert!((w[2] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_shrinks_weights_without_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(1, 1, 2.0), true);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        opt.step(&mut store, 0.1);
        assert!((store.value(id).item() - (2.0 - 0.1 * 0.05 * 2.0)).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(1, 2), true);
        store.grad_mut(a).data_mut().copy_from_slice(&[3.0, 4.0]);
        let before = clip_grad_norm(&mut store, 1.0);
        assert!((before - 5.0).abs() < 1e-9);
        assert!((store.grad_norm() - 1.0).abs() < 1e-6);
    }
}
