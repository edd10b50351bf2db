//! Adam optimizer with bias correction.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

use crate::error::Result;
use crate::fmath;
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor2D;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First/second moment estimates per parameter plus the step counter.
pub struct AdamState {
    moments: BTreeMap<String, (Tensor2D, Tensor2D)>,
    step: u64,
    beta1_pow: f64,
    beta2_pow: f64,
    /// Decoupled L2 coefficient added to gradients before the moment update.
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let moments = store
            .iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    (
                        Tensor2D::zeros(t.rows(), t.cols()),
                        Tensor2D::zeros(t.rows(), t.cols()),
                    ),
                )
            })
            .collect();
        Self {
            moments,
            step: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            weight_decay: 0.0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update of every parameter in the store.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.step += 1;
        self.beta1_pow *= BETA1;
        self.beta2_pow *= BETA2;
        let bias1 = 1.0 - self.beta1_pow;
        let bias2 = 1.0 - self.beta2_pow;
        let weight_decay = self.weight_decay;
        for (name, tensor) in params.iter_mut() {
            let grad = grads.get(name)?;
            let (m, v) = self
                .moments
                .get_mut(name)
                .expect("AdamState built from the same store");
            for ((w, &g_raw), (m_i, v_i)) in tensor
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                let g = g_raw + weight_decay * *w;
                *m_i = BETA1 * *m_i + (1.0 - BETA1) * g;
                *v_i = BETA2 * *v_i + (1.0 - BETA2) * g * g;
                let m_hat = *m_i / bias1;
                let v_hat = *v_i / bias2;
                *w -= lr * m_hat / (fmath::sqrt(v_hat) + EPS);
            }
        }
        Ok(())
    }
}
