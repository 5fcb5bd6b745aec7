//! Adam with standard defaults (beta1 0.9, beta2 0.999, eps 1e-8).

use crate::scalar::Scalar;
use crate::vit::{Parameters, ViTConfig};

pub struct Adam<F: Scalar> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    step_count: u32,
    m: Parameters<F>,
    v: Parameters<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: &ViTConfig, learning_rate: f64) -> Self {
        Self {
            lr: F::cast(learning_rate),
            beta1: F::cast(0.9),
            beta2: F::cast(0.999),
            eps: F::cast(1e-8),
            step_count: 0,
            m: Parameters::zeros(config),
            v: Parameters::zeros(config),
        }
    }

    pub fn step(&mut self, params: &mut Parameters<F>, grads: &Parameters<F>) {
        self.step_count += 1;
        let bc1 = F::one() - self.beta1.powi(self.step_count as i32);
        let bc2 = F::one() - self.beta2.powi(self.step_count as i32);
        let one = F::one();

        let mut ps = params.flat_mut();
        let gs = grads.flat();
        let mut ms = self.m.flat_mut();
        let mut vs = self.v.flat_mut();
        debug_assert_eq!(ps.len(), gs.len());
        for i in 0..ps.len() {
            let p = &mut *ps[i];
            let g = gs[i];
            let m = &mut *ms[i];
            let v = &mut *vs[i];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (one - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (one - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
