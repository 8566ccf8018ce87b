//! Adam with bias-corrected moment estimates.

use std::collections::BTreeMap;

use crate::backbone::ModelState;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..AdamConfig::default() }
    }
}

pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the model's non-frozen parameters. Gradients for
    /// frozen parameters are ignored; their values stay bitwise unchanged.
    pub fn step(&mut self, model: &mut ModelState<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let names: Vec<String> = model
            .params()
            .filter(|(name, p)| !p.frozen && grads.contains_key(*name))
            .map(|(name, _)| name.clone())
            .collect();
        for name in names {
            let grad = &grads[&name];
            let value = model.param_value_mut(&name).expect("name from iteration above");
            if grad.shape() != value.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("gradient shape {:?} vs parameter {:?} for {name}", grad.shape(), value.shape()),
                ));
            }
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![T::zero(); grad.numel()], vec![T::zero(); grad.numel()]));
            adam_update(value.data_mut(), grad.data(), m, v, self.step, &self.config);
        }
        Ok(())
    }
}

/// The update rule applied to one parameter buffer.
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    config: &AdamConfig,
) {
    let b1 = T::from_f64_lossy(config.beta1);
    let b2 = T::from_f64_lossy(config.beta2);
    let lr = T::from_f64_lossy(config.lr);
    let eps = T::from_f64_lossy(config.epsilon);
    let one = T::one();
    let bc1 = one - T::from_f64_lossy(config.beta1.powi(step as i32));
    let bc2 = one - T::from_f64_lossy(config.beta2.powi(step as i32));
    for i in 0..param.len() {
        m[i] = b1 * m[i] + (one - b1) * grad[i];
        v[i] = b2 * v[i] + (one - b2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}
