//! Adam optimizer over [`ModelParams`].

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamGrads};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Validation(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("adam_beta1", self.beta1), ("adam_beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Validation(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Validation(format!(
                "adam_eps must be > 0, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    first: [Vec<f64>; 4],
    second: [Vec<f64>; 4],
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ModelParams) -> Result<Self> {
        cfg.validate()?;
        let zeros = params.slices().map(|s| vec![0.0; s.len()]);
        Ok(Self {
            cfg,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bias1 = 1.0 - beta1.powi(self.step);
        let bias2 = 1.0 - beta2.powi(self.step);
        for (t, (p, g)) in params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .enumerate()
        {
            let (m, v) = (&mut self.first[t], &mut self.second[t]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
