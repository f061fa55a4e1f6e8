//! Adam optimizer over named parameter tensors.
//!
//! Moment buffers are keyed by tensor name so the update order follows the
//! model's canonical visit order regardless of how gradients were produced.
//! All per-element arithmetic runs in f64; parameters round back to their
//! storage type only at the end of each update.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::net::{Gradients, Parameters};
use crate::model::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// First and second moment estimates, allocated on first use per tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Applies one Adam update in place. If any gradient is missing, misshapen,
/// or non-finite the call fails before touching parameters or moments, so
/// the caller can treat the model as still being at the pre-step state.
pub fn adam_step(
    params: &mut Parameters<f32>,
    grads: &Gradients<f32>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;

    let mut precheck: Result<()> = Ok(());
    params.visit(&mut |name, tensor, role| {
        if !role.is_trainable() || precheck.is_err() {
            return;
        }
        precheck = match grads.get(name.as_str()) {
            Some(g) if g.shape() != tensor.shape() => Err(Error::Shape(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                tensor.shape()
            ))),
            Some(g) if !g.all_finite() => {
                Err(Error::Numeric(format!("non-finite gradient for {name}")))
            }
            Some(_) => Ok(()),
            None => Err(Error::Config(format!("no gradient for {name}"))),
        };
    });
    precheck?;

    let t = state.step + 1;
    let bias1 = 1.0 - cfg.beta1.powi(t as i32);
    let bias2 = 1.0 - cfg.beta2.powi(t as i32);

    params.visit_mut(&mut |name, tensor, role| {
        if !role.is_trainable() {
            return;
        }
        let g: &Tensor<f32> = &grads[name.as_str()];
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.numel()]);
        let v = state
            .second
            .entry(name)
            .or_insert_with(|| vec![0.0; g.numel()]);
        let pd = tensor.data_mut();
        for i in 0..g.numel() {
            let gi = g.data()[i] as f64;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            pd[i] = (pd[i] as f64 - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon)) as f32;
        }
    });
    state.step = t;
    Ok(())
}
