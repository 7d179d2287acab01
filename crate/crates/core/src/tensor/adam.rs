use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

/// Adam with bias correction. Moments are kept per parameter tensor in the
/// same order as the [`ParamStore`] they were created for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.values().iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, idx: usize) -> &[f64] {
        &self.m[idx]
    }

    pub fn second_moment(&self, idx: usize) -> &[f64] {
        &self.v[idx]
    }

    /// One update of every parameter. `grads` must be aligned with `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "adam: gradient list does not match parameters");
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        for (idx, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "adam: gradient shape mismatch");
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
    }
}
