//! Adam updates over a [`ParamSet`].

use crate::numeric::{Gradients, Scalar};
use crate::params::{Bound, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `θ ← θ − lr · m̂ / (√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(cfg: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update using the gradients of `bound` (the binding of `params`).
    pub fn update<T: Scalar>(&mut self, params: &mut ParamSet<T>, bound: &Bound, grads: &Gradients<T>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.get(bound[id]) else { continue };
            let shape = params.get(id).shape().to_vec();
            let mut data = params.data_mut(id);
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (((theta, &gv), mi), vi) in data.iter_mut().zip(g.data()).zip(m).zip(v) {
                let gv = gv.f64();
                *mi = beta1 * *mi + (1.0 - beta1) * gv;
                *vi = beta2 * *vi + (1.0 - beta2) * gv * gv;
                let upd = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *theta = T::of(theta.f64() - upd);
            }
            params.restore(id, &shape, data);
        }
    }
}
