//! The reverse diffusion chain as a finite-horizon MDP.
//!
//! MDP step `k in 0..T` runs diffusion timestep `t = T - k`: the state holds
//! `x_{T-k}` and the action is the next latent `x_{T-k-1}`. Transitions are
//! deterministic: the next state is `(action, context)`.

use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserParams, ForwardCache};
use crate::diffusion::{reverse_mean, reverse_mean_eps_jacobian, timestep_feature, Context, MixtureConfig};
use crate::error::{CocaError, Result};
use crate::schedule::NoiseSchedule;

/// Latents with a norm above this abort the rollout.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdpState<'a> {
    pub latent: &'a [f64],
    pub context: &'a Context,
    pub step_index: usize,
}

impl MdpState<'_> {
    /// Diffusion timestep whose reverse kernel acts from this state.
    pub fn timestep(&self, schedule: &NoiseSchedule) -> Result<usize> {
        let horizon = schedule.horizon();
        if self.step_index >= horizon {
            return Err(CocaError::TimestepOutOfRange { t: self.step_index, horizon });
        }
        Ok(horizon - self.step_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub context: Context,
    /// `x_T, ..., x_0`; `latents[k]` is the latent of MDP state `k`.
    pub latents: Vec<Vec<f64>>,
    /// `log pi(a_k | s_k)` at sampling time.
    pub logprobs: Vec<f64>,
    pub terminal_reward: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.logprobs.len()
    }

    /// Action of step `k`, aliased to the next state's latent.
    pub fn action(&self, k: usize) -> &[f64] {
        &self.latents[k + 1]
    }

    pub fn state(&self, k: usize) -> MdpState<'_> {
        MdpState { latent: &self.latents[k], context: &self.context, step_index: k }
    }

    pub fn final_latent(&self) -> &[f64] {
        self.latents.last().expect("trajectory has at least one latent")
    }

    pub fn to_record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            context_id: self.context.id,
            dim: self.latents[0].len(),
            latents: self.latents.concat(),
            logprobs: self.logprobs.clone(),
            terminal_reward: self.terminal_reward,
        }
    }
}

/// One line of the trajectory JSON Lines dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub context_id: usize,
    pub dim: usize,
    pub latents: Vec<f64>,
    pub logprobs: Vec<f64>,
    pub terminal_reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    ModePreference,
    Ring,
    Negdist,
}

impl FromStr for RewardKind {
    type Err = CocaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mode_preference" => Ok(Self::ModePreference),
            "ring" => Ok(Self::Ring),
            "negdist" => Ok(Self::Negdist),
            other => Err(CocaError::UnknownKind { what: "reward kind", name: other.into() }),
        }
    }
}

/// Terminal reward functions on the raw latent `x_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardFn {
    /// `exp(-||x0 - center||^2)` with `center` the preferred mode's mean.
    ModePreference { mode: usize, center: Vec<f64> },
    /// `-(||x0|| - radius)^2`.
    Ring { radius: f64 },
    /// `-||x0 - target||`.
    Negdist { target: Vec<f64> },
}

impl RewardFn {
    pub fn mode_preference(mixture: &MixtureConfig, mode: usize) -> Result<Self> {
        if mode >= mixture.modes {
            return Err(CocaError::InvalidConfig(format!("preferred mode {mode} >= {}", mixture.modes)));
        }
        Ok(Self::ModePreference { mode, center: mixture.mode_mean(mode) })
    }

    pub fn kind(&self) -> RewardKind {
        match self {
            Self::ModePreference { .. } => RewardKind::ModePreference,
            Self::Ring { .. } => RewardKind::Ring,
            Self::Negdist { .. } => RewardKind::Negdist,
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn evaluate_reward(reward: &RewardFn, x0: &[f64], _context: &Context) -> Result<f64> {
    let need = |n: usize| {
        if n != x0.len() {
            Err(CocaError::DimensionMismatch { expected: n, actual: x0.len() })
        } else {
            Ok(())
        }
    };
    match reward {
        RewardFn::ModePreference { center, .. } => {
            need(center.len())?;
            Ok((-dist(x0, center).powi(2)).exp())
        }
        RewardFn::Ring { radius } => {
            let r = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok(-(r - radius).powi(2))
        }
        RewardFn::Negdist { target } => {
            need(target.len())?;
            Ok(-dist(x0, target))
        }
    }
}

fn gaussian_logpdf(action: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let var = sigma * sigma;
    let sq: f64 = action.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum();
    -0.5 * action.len() as f64 * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var)
}

/// Mean and standard deviation of the Gaussian policy at `state`.
pub fn policy_distribution(
    params: &DenoiserParams,
    state: &MdpState<'_>,
    schedule: &NoiseSchedule,
) -> Result<(Vec<f64>, f64)> {
    let t = state.timestep(schedule)?;
    let sigma = schedule.sigma_at(t)?;
    if sigma <= 0.0 {
        return Err(CocaError::ZeroSigma(t));
    }
    let eps = params.predict(state.latent, timestep_feature(t, schedule), &state.context.embedding)?;
    Ok((reverse_mean(state.latent, t, &eps, schedule)?, sigma))
}

/// `log N(action; mu_theta(s), sigma_t^2 I)`.
pub fn policy_logprob(
    params: &DenoiserParams,
    state: &MdpState<'_>,
    action: &[f64],
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let (mean, sigma) = policy_distribution(params, state, schedule)?;
    if action.len() != mean.len() {
        return Err(CocaError::DimensionMismatch { expected: mean.len(), actual: action.len() });
    }
    Ok(gaussian_logpdf(action, &mean, sigma))
}

/// Log-probability of an action together with what is needed to
/// backpropagate `grad_theta log pi(action | state)`.
#[derive(Debug, Clone)]
pub struct ScoredAction {
    pub logprob: f64,
    cache: ForwardCache,
    /// `d log pi / d eps`.
    eps_score: Vec<f64>,
}

impl ScoredAction {
    /// Accumulates `coeff * grad_theta log pi(action | state)` into `grads`.
    pub fn accumulate(&self, params: &DenoiserParams, coeff: f64, grads: &mut DenoiserParams) {
        if coeff == 0.0 {
            return;
        }
        let upstream: Vec<f64> = self.eps_score.iter().map(|g| coeff * g).collect();
        params.backward(&self.cache, &upstream, grads);
    }
}

pub fn score_action(
    params: &DenoiserParams,
    state: &MdpState<'_>,
    action: &[f64],
    schedule: &NoiseSchedule,
) -> Result<ScoredAction> {
    let t = state.timestep(schedule)?;
    let sigma = schedule.sigma_at(t)?;
    if sigma <= 0.0 {
        return Err(CocaError::ZeroSigma(t));
    }
    let (eps, cache) = params.forward(state.latent, timestep_feature(t, schedule), &state.context.embedding)?;
    let mean = reverse_mean(state.latent, t, &eps, schedule)?;
    if action.len() != mean.len() {
        return Err(CocaError::DimensionMismatch { expected: mean.len(), actual: action.len() });
    }
    // d log N / d mu = (a - mu) / sigma^2, and d mu / d eps = jac * I.
    let k = reverse_mean_eps_jacobian(t, schedule)? / (sigma * sigma);
    let eps_score = action.iter().zip(&mean).map(|(a, m)| k * (a - m)).collect();
    Ok(ScoredAction { logprob: gaussian_logpdf(action, &mean, sigma), cache, eps_score })
}

/// Samples one denoising trajectory from `x_T ~ N(0, I)`.
pub fn rollout<R: Rng + ?Sized>(
    params: &DenoiserParams,
    context: &Context,
    schedule: &NoiseSchedule,
    reward: &RewardFn,
    rng: &mut R,
) -> Result<Trajectory> {
    let horizon = schedule.horizon();
    let d = params.data_dim;
    let mut latents = Vec::with_capacity(horizon + 1);
    latents.push((0..d).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>());
    let mut logprobs = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let state = MdpState { latent: &latents[k], context, step_index: k };
        let (mean, sigma) = policy_distribution(params, &state, schedule)?;
        let action: Vec<f64> = mean.iter().map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = action.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(CocaError::Divergence { step: k, reason: format!("latent norm {norm:e}") });
        }
        logprobs.push(gaussian_logpdf(&action, &mean, sigma));
        latents.push(action);
    }
    let terminal_reward = evaluate_reward(reward, latents.last().expect("nonempty"), context)?;
    if !terminal_reward.is_finite() {
        return Err(CocaError::Divergence { step: horizon, reason: "non-finite reward".into() });
    }
    Ok(Trajectory { context: context.clone(), latents, logprobs, terminal_reward })
}
