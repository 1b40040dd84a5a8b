use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 4e-4, beta1: 0.0, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are allocated lazily on the first
/// step and must keep the same parameter ordering afterwards.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Array2<T>], grads: &[Array2<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return dim_err(format!("{} params but {} grads", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dim() != g.dim() {
                return dim_err(format!("param {i}: {:?} vs grad {:?}", p.dim(), g.dim()));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
            self.v = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.dim() != g.dim()) {
            return dim_err("parameter set changed between Adam steps");
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (bc1, bc2, lr, eps) = (T::of(bc1), T::of(bc2), T::of(lr), T::of(eps));

        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            Zip::from(&mut **p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
        Ok(())
    }
}
