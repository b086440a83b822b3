use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::layers::ParamSet;
use crate::scalar::Scalar;

/// Adam hyperparameters. `weight_decay` is decoupled from the gradient:
/// after the adaptive step every parameter is shrunk by `lr * weight_decay`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 2e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(EngineError::Param(format!("invalid Adam configuration {self:?}")))
        }
    }
}

/// Optimizer state: first/second moments per parameter plus the step count.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let first = params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        let second = params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        Ok(Adam {
            config,
            first,
            second,
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update followed by decoupled weight decay.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != self.first.len() || params.len() != self.first.len() {
            return Err(EngineError::Contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.tensors_mut().zip(grads).zip(&self.first) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(EngineError::Contract(format!(
                    "optimizer shape mismatch: parameter {} / gradient {} / moment {}",
                    p.len(),
                    g.len(),
                    m.len()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let shrink = 1.0 - lr * weight_decay;
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for (((pv, &gv), mv), vv) in p.values_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gf = gv.to_f64();
                let mf = beta1 * mv.to_f64() + (1.0 - beta1) * gf;
                let vf = beta2 * vv.to_f64() + (1.0 - beta2) * gf * gf;
                *mv = T::lit(mf);
                *vv = T::lit(vf);
                let stepped = pv.to_f64() - lr * (mf / c1) / ((vf / c2).sqrt() + eps);
                *pv = T::lit(stepped * shrink);
            }
        }
        Ok(())
    }
}
