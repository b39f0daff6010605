//! Rectified Adam, with plain Adam kept as a fallback.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Radam,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Radam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Step counter and per-parameter moment estimates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub first: BTreeMap<String, Matrix>,
    pub second: BTreeMap<String, Matrix>,
}

/// What one step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub step: u64,
    /// Whether the variance-adapted branch was taken.
    pub rectified: bool,
    pub grad_norm: f64,
}

/// `ρ_t` of the rectified update; `ρ_∞` is the `t → ∞` limit.
pub fn rho(step: u64, beta2: f64) -> (f64, f64) {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powi(step as i32);
    (rho_inf - 2.0 * step as f64 * b2t / (1.0 - b2t), rho_inf)
}

/// Applies one update to every parameter from its accumulated gradient.
/// Nothing changes if any gradient is non-finite.
pub fn radam_step(params: &mut ParamStore, state: &mut TrainState, cfg: &OptimizerConfig) -> Result<StepInfo> {
    cfg.validate()?;
    let mut sq = 0.0;
    for (name, p) in params.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFiniteGradient { name: name.to_string() });
        }
        sq += p.grad.data().iter().map(|g| g * g).sum::<f64>();
    }
    let grad_norm = sq.sqrt();
    let clip = match cfg.grad_clip {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };

    state.step += 1;
    let t = state.step;
    let bias1 = 1.0 - cfg.beta1.powi(t as i32);
    let bias2 = 1.0 - cfg.beta2.powi(t as i32);
    let (rho_t, rho_inf) = rho(t, cfg.beta2);
    let rectified = match cfg.kind {
        OptimizerKind::Adam => true,
        OptimizerKind::Radam => rho_t > 4.0,
    };
    let r = match cfg.kind {
        OptimizerKind::Adam => 1.0,
        OptimizerKind::Radam if rectified => (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt(),
        OptimizerKind::Radam => 0.0,
    };

    for (name, p) in params.iter_mut() {
        let (rows, cols) = p.value.shape();
        let m = state.first.entry(name.to_string()).or_insert_with(|| Matrix::zeros(rows, cols));
        let v = state.second.entry(name.to_string()).or_insert_with(|| Matrix::zeros(rows, cols));
        if m.shape() != (rows, cols) || v.shape() != (rows, cols) {
            return Err(Error::shape("optimizer state", format!("{rows}x{cols}"), format!("{:?}", m.shape())));
        }
        let (m, v) = (m.data_mut(), v.data_mut());
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for i in 0..value.len() {
            let g = grad[i] * clip;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let update = if rectified {
                let v_hat = (v[i] / bias2).sqrt();
                r * m_hat / (v_hat + cfg.eps)
            } else {
                m_hat
            };
            value[i] -= cfg.lr * update;
        }
        if !p.value.is_finite() {
            return Err(Error::NonFinite { op: "optimizer update" });
        }
    }
    Ok(StepInfo { step: t, rectified, grad_norm })
}
