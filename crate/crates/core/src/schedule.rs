//! Fade-in schedule for the residual blend and the distillation weight.

use serde::{Deserialize, Serialize};

use crate::error::{PhmError, Result};

fn default_temperature() -> f64 {
    4.0
}

fn default_smoothing() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

/// Stage A objective weights and fade horizon.
///
/// Serialized keys: `t_fade`, `lambda_max`, `kd_temperature`,
/// `label_smoothing`, `recon_weight`, `recon_per_dim_norm` and the optional
/// `lambda_t_fade` (defaults to `t_fade`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub t_fade: usize,
    pub lambda_max: f64,
    #[serde(default = "default_temperature")]
    pub kd_temperature: f64,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default)]
    pub recon_weight: f64,
    /// Divide the reconstruction error by `d_out` as well as by the token count.
    #[serde(default = "default_true")]
    pub recon_per_dim_norm: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_t_fade: Option<usize>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            t_fade: 1000,
            lambda_max: 0.5,
            kd_temperature: default_temperature(),
            label_smoothing: default_smoothing(),
            recon_weight: 0.01,
            recon_per_dim_norm: true,
            lambda_t_fade: None,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PhmError::Config(m.to_string()));
        if self.t_fade < 1 || self.lambda_t_fade == Some(0) {
            return bad("t_fade must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.lambda_max) {
            return bad("lambda_max must lie in [0, 1]");
        }
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            return bad("kd_temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if !(self.recon_weight >= 0.0 && self.recon_weight.is_finite()) {
            return bad("recon_weight must be non-negative");
        }
        Ok(())
    }

    pub fn alpha(&self, step: usize) -> f64 {
        alpha_at(step, self.t_fade)
    }

    pub fn lambda(&self, step: usize) -> f64 {
        lambda_at(step, self.lambda_t_fade.unwrap_or(self.t_fade), self.lambda_max)
    }
}

/// `min(1, t / T_fade)`
pub fn alpha_at(step: usize, t_fade: usize) -> f64 {
    assert!(t_fade >= 1, "fade horizon must be positive");
    if step >= t_fade {
        1.0
    } else {
        step as f64 / t_fade as f64
    }
}

/// `λ_max · min(1, t / T_fade)`
pub fn lambda_at(step: usize, t_fade: usize, lambda_max: f64) -> f64 {
    lambda_max * alpha_at(step, t_fade)
}

/// `(1 − λ(t))·CE + λ(t)·KD + μ·recon`
pub fn total_loss(step: usize, ce: f64, kd: f64, recon: f64, schedule: &TrainSchedule) -> Result<f64> {
    if !(ce.is_finite() && kd.is_finite() && recon.is_finite()) {
        return Err(PhmError::Numeric(format!(
            "non-finite loss component: ce={ce}, kd={kd}, recon={recon}"
        )));
    }
    let lambda = schedule.lambda(step);
    Ok((1.0 - lambda) * ce + lambda * kd + schedule.recon_weight * recon)
}
