//! Adaptive-moment (Adam) updates over a [`ParamStore`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{GradMap, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the whole gradient when its global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

pub fn global_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Gradients for names absent from `params` are ignored,
    /// so a store can be updated from a gradient map covering more modules.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) {
        self.step += 1;
        let c = self.config;
        let scale = match c.clip_norm {
            Some(max) => {
                let n = global_norm(grads);
                if n > max && n > 0.0 {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            assert_eq!(p.shape(), g.shape(), "gradient shape for {name}");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi * scale;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *pi -= c.learning_rate * mh / (vh.sqrt() + c.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
        let before = p.clone();
        let mut g = GradMap::new();
        g.insert("w".into(), Tensor::from_vec(&[3], vec![0.3, 0.1, -4.0]));
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.0,
            ..Default::default()
        });
        for _ in 0..5 {
            opt.step(&mut p, &g);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::from_vec(&[2], vec![3.0, -1.0]));
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.05,
            ..Default::default()
        });
        for _ in 0..2000 {
            let x = p.get("x").unwrap().clone();
            let mut g = GradMap::new();
            g.insert("x".into(), x.map(|v| 2.0 * (v - 0.5)));
            opt.step(&mut p, &g);
        }
        for &v in p.get("x").unwrap().data() {
            assert!((v - 0.5).abs() < 1e-3, "{v}");
        }
    }
}
