//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment buffers for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments shaped like `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        Self {
            config,
            step_count: 0,
            first_moment: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every parameter. `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, state tracks {}",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != self.first_moment[i].len() || g.len() != p.numel() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {i}: {} values, grad {}, moment {}", p.numel(), g.len(), self.first_moment[i].len()),
                ));
            }
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g[k].as_f64();
                let mk = c.beta1 * m[k].as_f64() + (1.0 - c.beta1) * gk;
                let vk = c.beta2 * v[k].as_f64() + (1.0 - c.beta2) * gk * gk;
                m[k] = T::from_f64(mk);
                v[k] = T::from_f64(vk);
                let update = c.learning_rate * (mk / bc1) / ((vk / bc2).sqrt() + c.epsilon);
                *w = T::from_f64(w.as_f64() - update);
            }
        }
        Ok(())
    }
}
