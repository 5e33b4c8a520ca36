//! Adam with bias correction; epsilon is added after the square root.

use super::model::{DetectorModel, Gradients};
use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment state, aligned with `params()` order.
#[derive(Debug, Clone)]
pub struct Adam<T = f32> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &DetectorModel<T>) -> Self {
        let m = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let v = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, model: &mut DetectorModel<T>, grads: &Gradients<T>, cfg: &AdamConfig) {
        self.t += 1;
        let t = self.t as i32;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let one = T::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let lr = T::from_f64(cfg.lr);
        let eps = T::from_f64(cfg.eps);
        for ((param, grad), (m, v)) in model
            .params_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(param.shape(), grad.shape());
            for ((p, g), (mi, vi)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = b1 * *mi + (one - b1) * *g;
                *vi = b2 * *vi + (one - b2) * *g * *g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// One optimizer update; thin alias kept for call-site clarity.
pub fn optimizer_step<T: Scalar>(
    model: &mut DetectorModel<T>,
    grads: &Gradients<T>,
    state: &mut Adam<T>,
    cfg: &AdamConfig,
) {
    state.step(model, grads, cfg);
}
