use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to parameter `i`; `None` counts as zero.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f32>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if g.len() != params.value(i).numel() {
                return Err(Error::Dimension(format!(
                    "gradient for {} has {} values, parameter has {}",
                    params.name(i),
                    g.len(),
                    params.value(i).numel()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {}",
                    params.name(i)
                )));
            }
        }
        if self.first.len() != params.len() {
            self.first = (0..params.len())
                .map(|i| vec![0.0; params.value(i).numel()])
                .collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let w = params.value_mut(i).data_mut();
            for j in 0..w.len() {
                let gj = g.as_ref().map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
