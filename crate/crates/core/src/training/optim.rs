//! Rectified Adam wrapped in Lookahead.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RangerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fast steps between Lookahead synchronizations.
    pub k: u64,
    /// Lookahead interpolation factor.
    pub alpha: f64,
    /// Minimum SMA length before the adaptive step is used.
    pub threshold: f64,
}

impl Default for RangerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-5,
            k: 6,
            alpha: 0.5,
            threshold: 5.0,
        }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    slow: Vec<f64>,
}

pub struct Ranger {
    cfg: RangerConfig,
    step: u64,
    slots: BTreeMap<String, Slot>,
}

impl Ranger {
    pub fn new(cfg: RangerConfig) -> Result<Self> {
        let ok = cfg.lr > 0.0
            && (0.0..1.0).contains(&cfg.beta1)
            && (0.0..1.0).contains(&cfg.beta2)
            && cfg.eps > 0.0
            && cfg.k > 0
            && (0.0..=1.0).contains(&cfg.alpha);
        if !ok {
            return Err(Error::config(format!("invalid optimizer settings {cfg:?}")));
        }
        Ok(Self {
            cfg,
            step: 0,
            slots: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Step-size multiplier of rectified Adam at step `t`, or `None` while
    /// the variance estimate is not yet trusted.
    pub fn rectification(&self, t: u64) -> Option<f64> {
        let b2 = self.cfg.beta2;
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let b2t = b2.powi(t as i32);
        let rho = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
        (rho > self.cfg.threshold).then(|| {
            ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
        })
    }

    /// Applies one update to every parameter in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let RangerConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        let rect = self.rectification(t);
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            p.ensure_same_shape(grad)?;
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; grad.numel()],
                v: vec![0.0; grad.numel()],
                slow: p.data().to_vec(),
            });
            for (i, (x, &g)) in p.data_mut().iter_mut().zip(grad.data()).enumerate() {
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                *x -= match rect {
                    Some(r) => lr * r * m_hat / ((slot.v[i] / bc2).sqrt() + eps),
                    None => lr * m_hat,
                };
            }
        }
        if t.is_multiple_of(self.cfg.k) {
            let alpha = self.cfg.alpha;
            for (name, slot) in &mut self.slots {
                let p = params
                    .get_mut(name)
                    .ok_or_else(|| Error::MissingParam(name.clone()))?;
                for (x, s) in p.data_mut().iter_mut().zip(slot.slow.iter_mut()) {
                    *s += alpha * (*x - *s);
                    *x = *s;
                }
            }
        }
        Ok(())
    }
}
