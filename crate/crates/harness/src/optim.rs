//! Adam with decoupled weight decay, and global-norm gradient clipping.

use cpool_core::params::ParamStore;
use cpool_core::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const EPSILON: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Adam {
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<S: Scalar>(store: &ParamStore<S>, weight_decay: f64) -> Self {
        let zeros = || store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Adam {
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads` is aligned with the store; `None` entries
    /// (buffers, unused parameters) are left untouched. Weight decay applies
    /// to matrices and kernels only, not to biases or norm gains. Returns
    /// false if any updated value is not finite.
    pub fn step<S: Scalar>(&mut self, store: &mut ParamStore<S>, grads: &[Option<Tensor<S>>], lr: f64) -> bool {
        let mut finite = true;
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for (k, (entry, grad)) in store.entries_mut().iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            if !entry.trainable {
                continue;
            }
            let decay = if entry.value.rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (p, g)) in entry.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g.as_f64();
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + EPSILON);
                let x = p.as_f64();
                let next = x - lr * (update + decay * x);
                finite &= next.is_finite();
                *p = S::from_f64_lossy(next);
            }
        }
        finite
    }
}

pub fn global_norm<S: Scalar>(grads: &[Option<Tensor<S>>]) -> f64 {
    grads.iter().flatten().map(|g| g.l2_norm_sq()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Option<Tensor<S>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x = S::from_f64_lossy(x.as_f64() * factor));
        }
    }
    norm
}
