use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are laid out like the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self {
            config,
            step: 0,
            m: params.zero_grads(),
            v: params.zero_grads(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.data.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p.data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::default();
        store.zeros("p".into(), vec![3]);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.update(&mut store, &[vec![2.0, -0.5, 0.0]], 0.1);
        let d = &store.params[0].data;
        assert!((d[0] + 0.1).abs() < 1e-6 && (d[1] - 0.1).abs() < 1e-6 && d[2] == 0.0);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::default();
        store.zeros("p".into(), vec![2]);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for _ in 0..2000 {
            let d = &store.params[0].data;
            let g = vec![2.0 * (d[0] - 3.0), 2.0 * (d[1] + 1.0)];
            adam.update(&mut store, &[g], 0.05);
        }
        let d = &store.params[0].data;
        assert!((d[0] - 3.0).abs() < 1e-3 && (d[1] + 1.0).abs() < 1e-3);
    }
}
