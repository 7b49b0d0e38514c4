//! Adam optimizer over a [`ParamStore`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// Adam with bias correction. Moment buffers persist across steps and are
/// keyed by parameter name; only `trainable == true` parameters are ever
/// updated.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    first_moment: HashMap<String, Vec<f64>>,
    second_moment: HashMap<String, Vec<f64>>,
}

impl Adam {
    /// Standard defaults: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first_moment: HashMap::new(),
            second_moment: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every trainable parameter. Errors if a trainable
    /// parameter has no gradient buffer.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let bias1 = 1.0 - self.beta1.powi(t as i32);
        let bias2 = 1.0 - self.beta2.powi(t as i32);
        for p in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let numel = p.tensor.numel();
            let grad = p.tensor.grad().ok_or_else(|| {
                Error::Contract(format!("trainable parameter {:?} has no gradient", p.name))
            })?;
            let grad = grad.to_vec();
            let m = self
                .first_moment
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; numel]);
            let v = self
                .second_moment
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; numel]);
            let data = p.tensor.data_mut();
            for i in 0..numel {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
