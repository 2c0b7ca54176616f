use serde::{Deserialize, Serialize};

use crate::error::{CocaError, Result};

/// Variance schedule of the forward process.
///
/// Timesteps are 1-based (`1..=T`) at the public surface; the tables are
/// stored 0-based so `beta[t - 1]` is the variance of timestep `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Reverse-process standard deviation, fixed at `sqrt(beta_t)`.
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation of beta between the two endpoints.
    pub fn linear(horizon: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if horizon == 0 {
            return Err(CocaError::InvalidSchedule("horizon must be at least 1".into()));
        }
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(beta_start) || !in_unit(beta_end) {
            return Err(CocaError::InvalidSchedule(format!(
                "beta endpoints must lie in (0, 1), got {beta_start} and {beta_end}"
            )));
        }
        if beta_start > beta_end {
            return Err(CocaError::InvalidSchedule(format!("beta_start {beta_start} exceeds beta_end {beta_end}")));
        }
        let beta: Vec<f64> = (0..horizon)
            .map(|i| {
                if horizon == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (horizon - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(CocaError::InvalidSchedule("empty beta table".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(CocaError::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(Self { beta, alpha, alpha_bar, sigma })
    }

    pub fn horizon(&self) -> usize {
        self.beta.len()
    }

    pub fn check_timestep(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.horizon() {
            return Err(CocaError::TimestepOutOfRange { t, horizon: self.horizon() });
        }
        Ok(t - 1)
    }

    pub fn beta_at(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check_timestep(t)?])
    }

    pub fn alpha_at(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check_timestep(t)?])
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check_timestep(t)?])
    }

    pub fn sigma_at(&self, t: usize) -> Result<f64> {
        Ok(self.sigma[self.check_timestep(t)?])
    }
}
