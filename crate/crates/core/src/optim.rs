//! Rectified Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::network::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RAdamState {
    pub step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl RAdamState {
    pub fn new(like: &ParamSet) -> Self {
        Self {
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn matches(&self, like: &ParamSet) -> bool {
        self.m.same_layout(like)
            && self.v.same_layout(like)
            && self.m.check_shapes().is_ok()
            && self.v.check_shapes().is_ok()
    }

    /// One update of `params` from `grads`.
    pub fn update(&mut self, cfg: &RAdamConfig, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(Error::invalid("optimizer state does not match the parameter layout"));
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let b1t = libm::pow(b1, t);
        let b2t = libm::pow(b2, t);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        let rect = if rho_t > 5.0 {
            Some(math::sqrt(
                (rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t),
            ))
        } else {
            None
        };
        for slot in 0..params.len() {
            let g = grads.get(slot);
            let m = self.m.get_mut(slot);
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            }
            let v = self.v.get_mut(slot);
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let (m, v) = (self.m.get(slot), self.v.get(slot));
            let p = params.get_mut(slot);
            for i in 0..p.len() {
                let m_hat = m[i] / (1.0 - b1t);
                p[i] -= match rect {
                    Some(r) => cfg.lr * r * m_hat / (math::sqrt(v[i] / (1.0 - b2t)) + cfg.eps),
                    None => cfg.lr * m_hat,
                };
            }
        }
        Ok(())
    }
}
