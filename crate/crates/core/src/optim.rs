//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Param};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && [self.lr, self.eps, self.weight_decay].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

/// Optimizer state. Moment buffers are keyed by parameter name and created
/// lazily on a parameter's first gradient.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    moments: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamW {
            config,
            step: 0,
            moments: HashMap::new(),
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr · lr_scale`. Frozen
    /// parameters and parameters without a gradient are left untouched.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Param>,
        grads: &Gradients,
        lr_scale: f64,
    ) -> Result<()> {
        let c = self.config.clone();
        let lr = c.lr * lr_scale;
        let mut updates = Vec::new();
        for p in params {
            if p.frozen {
                continue;
            }
            let Some(g) = grads.named(&p.name) else { continue };
            if g.shape() != p.value.shape() {
                return Err(Error::dim(
                    "adamw",
                    format!("gradient of {} has shape {:?}", p.name, g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {}", p.name)));
            }
            updates.push((p, g));
        }
        for (p, g) in updates {
            let state = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; g.len()],
                second: vec![0.0; g.len()],
                steps: 0,
            });
            state.steps += 1;
            let bc1 = 1.0 - c.beta1.powi(state.steps);
            let bc2 = 1.0 - c.beta2.powi(state.steps);
            let decay = 1.0 - lr * c.weight_decay;
            for (((theta, &grad), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(state.first.iter_mut())
                .zip(state.second.iter_mut())
            {
                *theta *= decay;
                *m = c.beta1 * *m + (1.0 - c.beta1) * grad;
                *v = c.beta2 * *v + (1.0 - c.beta2) * grad * grad;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}
