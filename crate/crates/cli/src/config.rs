//! Run configuration: a TOML file whose fields can each be overridden by a
//! command-line flag.

use std::path::{Path, PathBuf};

use anyhow::Context as _;
use coca::diffusion::PretrainConfig;
use coca::mdp::{RewardFn, RewardKind};
use coca::trainer::TrainConfig;
use coca::{MixtureConfig, NoiseSchedule};
use serde::{Deserialize, Serialize};

use crate::Invalid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub horizon: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { horizon: 20, beta_start: 0.01, beta_end: 0.35 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, Invalid> {
        NoiseSchedule::linear(self.horizon, self.beta_start, self.beta_end).map_err(|e| Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub kind: RewardKind,
    /// Target point for `negdist`; empty means the origin.
    pub target: Vec<f64>,
    /// Ring radius for `ring`.
    pub radius: f64,
    /// Preferred mode for `mode_preference`.
    pub mode: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { kind: RewardKind::Negdist, target: Vec::new(), radius: 3.0, mode: 0 }
    }
}

impl RewardConfig {
    pub fn build(&self, mixture: &MixtureConfig) -> Result<RewardFn, Invalid> {
        match self.kind {
            RewardKind::Negdist => {
                let target = if self.target.is_empty() { vec![0.0; mixture.dim] } else { self.target.clone() };
                if target.len() != mixture.dim {
                    return Err(Invalid(format!("target has {} coordinates, data has {}", target.len(), mixture.dim)));
                }
                if target.iter().any(|v| !v.is_finite()) {
                    return Err(Invalid("target must be finite".into()));
                }
                Ok(RewardFn::Negdist { target })
            }
            RewardKind::Ring => {
                if !(self.radius.is_finite() && self.radius >= 0.0) {
                    return Err(Invalid(format!("ring radius {} must be finite and >= 0", self.radius)));
                }
                Ok(RewardFn::Ring { radius: self.radius })
            }
            RewardKind::ModePreference => {
                RewardFn::mode_preference(mixture, self.mode).map_err(|e| Invalid(e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: MixtureConfig,
    pub schedule: ScheduleConfig,
    pub reward: RewardConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub dump_contributions: bool,
    pub svg: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: MixtureConfig::default(),
            schedule: ScheduleConfig::default(),
            reward: RewardConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs"),
            dump_contributions: false,
            svg: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())).into())
    }

    /// Checks everything that can be checked before any compute.
    pub fn validate(&self) -> Result<(), Invalid> {
        self.data.validate().map_err(|e| Invalid(e.to_string()))?;
        let schedule = self.schedule.build()?;
        self.reward.build(&self.data)?;
        if self.pretrain.batch_size == 0 || self.pretrain.hidden == 0 {
            return Err(Invalid("pretrain batch_size and hidden must be positive".into()));
        }
        if !(self.pretrain.learning_rate > 0.0 && self.pretrain.learning_rate.is_finite()) {
            return Err(Invalid("pretrain learning_rate must be positive".into()));
        }
        self.train.validate(schedule.horizon()).map_err(|e| Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use coca::Method;

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            [train]
            method = "sparse"
            epochs = 7

            [reward]
            kind = "ring"
            radius = 2.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.train.method, Method::Sparse);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.window_size, 5);
        assert_eq!(cfg.schedule, ScheduleConfig::default());
        assert_eq!(cfg.reward.build(&cfg.data).unwrap(), RewardFn::Ring { radius: 2.0 });
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nlearning_rat = 1.0\n").is_err());
        let mut cfg = RunConfig::default();
        cfg.train.window_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.reward.target = vec![1.0, 2.0, 3.0];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.schedule.beta_start = 0.9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shipped_config_is_valid() {
        let cfg: RunConfig = toml::from_str(include_str!("../../../configs/negdist_toy.toml")).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.reward.kind, RewardKind::Negdist);
        assert_eq!((cfg.schedule.horizon, cfg.train.window_size), (20, 5));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
