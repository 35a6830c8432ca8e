use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with per-parameter moment estimates. Frozen parameters are skipped
/// and their moments left untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Adam {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.frozen {
                continue;
            }
            let (val, g) = (p.value.data_mut(), p.grad.data());
            for (((x, &g), m), v) in val.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Rescales trainable gradients so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.params_mut().iter_mut().filter(|p| !p.frozen) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        store.get_mut(id).grad = Tensor::from_vec(&[2], vec![0.3, -5.0]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.update(&mut store, 0.01);
        let v = store.get(id).value.data();
        assert!((v[0] - 0.99).abs() < 1e-9 && (v[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[3], vec![3.0, -2.0, 0.5]));
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..2000 {
            let g: Vec<f64> = store.get(id).value.data().iter().map(|x| 2.0 * x).collect();
            store.get_mut(id).grad = Tensor::from_vec(&[3], g);
            adam.update(&mut store, 0.05);
        }
        assert!(store.get(id).value.data().iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn clipping_respects_frozen() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(&[2]));
        let b = store.add("b", Tensor::zeros(&[1]));
        store.get_mut(a).grad = Tensor::from_vec(&[2], vec![30.0, 40.0]);
        store.get_mut(b).grad = Tensor::from_vec(&[1], vec![100.0]);
        store.set_frozen("b", true);
        let n = clip_grad_norm(&mut store, 10.0);
        assert_eq!(n, 50.0);
        assert_eq!(store.get(a).grad.data(), &[6.0, 8.0]);
        assert_eq!(store.get(b).grad.data(), &[100.0]);
    }
}
