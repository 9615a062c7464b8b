//! Adam with bias correction and the cosine-annealing schedule.

use ndarray::{Array, Dimension};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct AdamParams<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
}

impl<T: Scalar> Default for AdamParams<T> {
    fn default() -> Self {
        AdamParams {
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.98),
            eps: T::from_f64(1e-8),
            weight_decay: T::zero(),
        }
    }
}

/// First/second-moment state for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T, D: Dimension> {
    m: Array<T, D>,
    v: Array<T, D>,
}

impl<T: Scalar, D: Dimension> AdamState<T, D> {
    pub fn zeros_like(param: &Array<T, D>) -> Self {
        AdamState {
            m: Array::zeros(param.raw_dim()),
            v: Array::zeros(param.raw_dim()),
        }
    }

    /// One Adam update. `t` is the 1-based global step.
    pub fn update(
        &mut self,
        param: &mut Array<T, D>,
        grad: &Array<T, D>,
        t: usize,
        lr: T,
        p: &AdamParams<T>,
    ) {
        let one = T::one();
        let t_t = T::from_f64(t as f64);
        let bc1 = one - p.beta1.powf(t_t);
        let bc2 = one - p.beta2.powf(t_t);
        ndarray::Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|w, m, v, &g| {
                let g = g + p.weight_decay * *w;
                *m = p.beta1 * *m + (one - p.beta1) * g;
                *v = p.beta2 * *v + (one - p.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + p.eps);
            });
    }
}

/// Cosine annealing from `lr0` down to `lr_min` over `total` steps.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let progress = (step.min(total)) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}
