//! Adam optimizer with bias-corrected moment estimates.

use crate::params::{ParamId, ParamStore};

pub const DEFAULT_LR: f64 = 1e-4;

#[derive(Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    // first/second moments indexed like the store; empty for buffers
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store
            .entries()
            .iter()
            .map(|e| {
                if e.trainable {
                    vec![0.0; e.tensor.len()]
                } else {
                    Vec::new()
                }
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over `(param, gradient)` pairs; gradients must match the
    /// parameter lengths.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, grad) in grads {
            let slot = id.index();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            debug_assert_eq!(m.len(), grad.len());
            let values = store.values_mut(*id);
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
