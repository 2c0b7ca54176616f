//! Contribution-based credit assignment.
//!
//! A trajectory's similarity series `sim[t]`, `t in 0..=T`, compares the
//! latent `x_{T-t}` with the final latent `x_0`. Timesteps `1..=T` are cut
//! into windows of `W`; the increase of the window mean over the previous
//! window (or over `sim[0]` for the first window) is that window's
//! contribution, and contributions are normalized into per-step weights that
//! split the terminal reward across the denoising steps.
//!
//! Weight index `k` belongs to MDP step `k`, whose action produces
//! `x_{T-k-1}`, i.e. similarity index `k + 1`.

use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserParams;
use crate::diffusion::{predict_x0, timestep_feature};
use crate::error::{CocaError, Result};
use crate::mdp::{evaluate_reward, RewardFn, Trajectory};
use crate::schedule::NoiseSchedule;

/// Below this magnitude the contribution denominator is treated as degenerate.
pub const DENOMINATOR_EPS: f64 = 1e-8;
/// Vectors with a smaller norm have cosine similarity 0 by convention.
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    Cosine,
    L2,
    Reward,
}

impl FromStr for SimilarityMetric {
    type Err = CocaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "l2" => Ok(Self::L2),
            "reward" => Ok(Self::Reward),
            other => Err(CocaError::UnknownKind { what: "similarity metric", name: other.into() }),
        }
    }
}

/// How window shares are spread over the timesteps of a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNorm {
    /// Share divided by window length; weights sum to 1.
    #[default]
    PerTimestep,
    /// Every timestep carries the full window share; weights sum to `W`.
    PerWindow,
}

impl FromStr for WeightNorm {
    type Err = CocaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_timestep" => Ok(Self::PerTimestep),
            "per_window" => Ok(Self::PerWindow),
            other => Err(CocaError::UnknownKind { what: "weight normalization", name: other.into() }),
        }
    }
}

/// Which window increments enter the normalizing sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    #[default]
    AllWindows,
    /// Sum from window 1 onward; window 0 still gets its own share.
    SkipFirstWindow,
}

impl FromStr for Denominator {
    type Err = CocaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_windows" => Ok(Self::AllWindows),
            "skip_first_window" => Ok(Self::SkipFirstWindow),
            other => Err(CocaError::UnknownKind { what: "denominator mode", name: other.into() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightOptions {
    pub norm: WeightNorm,
    pub denominator: Denominator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Coca,
    Uca,
    Sparse,
    BetaMix,
}

impl Method {
    pub fn needs_weights(self) -> bool {
        matches!(self, Self::Coca | Self::BetaMix)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Coca => "coca",
            Self::Uca => "uca",
            Self::Sparse => "sparse",
            Self::BetaMix => "beta_mix",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CocaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coca" => Ok(Self::Coca),
            "uca" => Ok(Self::Uca),
            "sparse" => Ok(Self::Sparse),
            "beta_mix" => Ok(Self::BetaMix),
            other => Err(CocaError::UnknownKind { what: "method", name: other.into() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionProfile {
    pub sim: Vec<f64>,
    pub window_means: Vec<f64>,
    pub window_increments: Vec<f64>,
    pub weights: Vec<f64>,
    pub window_size: usize,
    /// The denominator guard fired and `weights` is the uniform fallback.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRewards {
    pub per_step: Vec<f64>,
    pub method: Method,
    pub beta: f64,
}

/// Extra inputs needed by the predicted-x0 reward metric.
#[derive(Debug, Clone, Copy)]
pub struct RewardProbe<'a> {
    pub reward: &'a RewardFn,
    pub params: &'a DenoiserParams,
    pub schedule: &'a NoiseSchedule,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < ZERO_NORM_EPS || nb < ZERO_NORM_EPS {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Similarity of every latent to the final latent, indexed by `t in 0..=T`.
///
/// The reward metric queries the reward function once per intermediate
/// step; `sim[T]` reuses the stored terminal reward.
pub fn similarity_series(
    traj: &Trajectory,
    metric: SimilarityMetric,
    probe: Option<RewardProbe<'_>>,
) -> Result<Vec<f64>> {
    let horizon = traj.horizon();
    let x0 = traj.final_latent();
    match metric {
        SimilarityMetric::Cosine => {
            let mut sim: Vec<f64> = traj.latents[..horizon].iter().map(|x| cosine(x, x0)).collect();
            sim.push(if cosine(x0, x0) == 0.0 { 0.0 } else { 1.0 });
            Ok(sim)
        }
        SimilarityMetric::L2 => Ok(traj
            .latents
            .iter()
            .map(|x| -x.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect()),
        SimilarityMetric::Reward => {
            let probe = probe.ok_or_else(|| {
                CocaError::InvalidConfig("reward similarity needs reward function, params and schedule".into())
            })?;
            if probe.schedule.horizon() != horizon {
                return Err(CocaError::DimensionMismatch { expected: probe.schedule.horizon(), actual: horizon });
            }
            let mut sim = Vec::with_capacity(horizon + 1);
            for (k, x) in traj.latents[..horizon].iter().enumerate() {
                let t = horizon - k;
                let eps = probe.params.predict(x, timestep_feature(t, probe.schedule), &traj.context.embedding)?;
                let x0_hat = predict_x0(x, t, &eps, probe.schedule)?;
                sim.push(evaluate_reward(probe.reward, &x0_hat, &traj.context)?);
            }
            sim.push(traj.terminal_reward);
            Ok(sim)
        }
    }
}

/// Reward-function evaluations made by [`similarity_series`] for one trajectory.
pub fn similarity_queries(metric: SimilarityMetric, horizon: usize) -> usize {
    match metric {
        SimilarityMetric::Reward => horizon,
        _ => 0,
    }
}

/// Windows as ranges of MDP step indices `k` (similarity index `k + 1`).
pub fn window_ranges(horizon: usize, window: usize) -> Result<Vec<Range<usize>>> {
    if window == 0 || window > horizon {
        return Err(CocaError::InvalidWindow { window, horizon });
    }
    Ok((0..horizon).step_by(window).map(|start| start..(start + window).min(horizon)).collect())
}

/// Window means of `sim[1..=T]` and their increments.
pub fn window_smooth(sim: &[f64], window: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let horizon = sim.len().saturating_sub(1);
    let ranges = window_ranges(horizon, window)?;
    let means: Vec<f64> =
        ranges.iter().map(|r| sim[r.start + 1..r.end + 1].iter().sum::<f64>() / r.len() as f64).collect();
    let increments = means.iter().enumerate().map(|(i, m)| m - if i == 0 { sim[0] } else { means[i - 1] }).collect();
    Ok((means, increments))
}

/// Normalizes window increments into per-step weights.
///
/// Fails with [`CocaError::DegenerateDenominator`] when the normalizing sum
/// is smaller than [`DENOMINATOR_EPS`] in magnitude.
pub fn contribution_weights(
    increments: &[f64],
    window: usize,
    horizon: usize,
    options: WeightOptions,
) -> Result<Vec<f64>> {
    let ranges = window_ranges(horizon, window)?;
    if ranges.len() != increments.len() {
        return Err(CocaError::DimensionMismatch { expected: ranges.len(), actual: increments.len() });
    }
    let skip = match options.denominator {
        Denominator::AllWindows => 0,
        Denominator::SkipFirstWindow => 1,
    };
    let total: f64 = increments.iter().skip(skip).sum();
    if total.is_nan() || total.abs() < DENOMINATOR_EPS {
        return Err(CocaError::DegenerateDenominator(total));
    }
    let mut weights = vec![0.0; horizon];
    for (range, inc) in ranges.iter().zip(increments) {
        let share = inc / total;
        let w = match options.norm {
            WeightNorm::PerTimestep => share / range.len() as f64,
            WeightNorm::PerWindow => share,
        };
        weights[range.clone()].fill(w);
    }
    Ok(weights)
}

pub fn uniform_weights(horizon: usize) -> Vec<f64> {
    vec![1.0 / horizon as f64; horizon]
}

/// Full contribution profile; a degenerate denominator falls back to uniform
/// weights and sets `degenerate`.
pub fn contribution_profile(
    traj: &Trajectory,
    metric: SimilarityMetric,
    window: usize,
    options: WeightOptions,
    probe: Option<RewardProbe<'_>>,
) -> Result<ContributionProfile> {
    let sim = similarity_series(traj, metric, probe)?;
    let (window_means, window_increments) = window_smooth(&sim, window)?;
    let horizon = traj.horizon();
    let (weights, degenerate) = match contribution_weights(&window_increments, window, horizon, options) {
        Ok(w) => (w, false),
        Err(CocaError::DegenerateDenominator(_)) => (uniform_weights(horizon), true),
        Err(e) => return Err(e),
    };
    Ok(ContributionProfile { sim, window_means, window_increments, weights, window_size: window, degenerate })
}

/// Splits a terminal reward into per-step rewards.
///
/// `weights` is required for `coca` and `beta_mix`; `beta` is only read by
/// `beta_mix`.
pub fn redistribute(
    reward: f64,
    horizon: usize,
    weights: Option<&[f64]>,
    method: Method,
    beta: f64,
) -> Result<StepRewards> {
    if horizon == 0 {
        return Err(CocaError::MethodMismatch("horizon must be positive".into()));
    }
    let weights = if method.needs_weights() {
        let w = weights.ok_or_else(|| CocaError::MethodMismatch(format!("{method} needs weights")))?;
        if w.len() != horizon {
            return Err(CocaError::MethodMismatch(format!("{} weights for horizon {horizon}", w.len())));
        }
        Some(w)
    } else {
        None
    };
    if method == Method::BetaMix && !(0.0..=1.0).contains(&beta) {
        return Err(CocaError::MethodMismatch(format!("beta {beta} outside [0, 1]")));
    }
    let last = horizon - 1;
    let per_step: Vec<f64> = match method {
        Method::Coca => weights.expect("checked").iter().map(|w| w * reward).collect(),
        Method::Uca => vec![reward / horizon as f64; horizon],
        Method::Sparse => (0..horizon).map(|k| if k == last { reward } else { 0.0 }).collect(),
        Method::BetaMix => weights
            .expect("checked")
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let dense = beta * (w * reward);
                if k == last {
                    dense + (1.0 - beta) * reward
                } else {
                    dense
                }
            })
            .collect(),
    };
    Ok(StepRewards { per_step, method, beta: if method == Method::BetaMix { beta } else { 0.0 } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Context;

    fn traj_from(latents: Vec<Vec<f64>>, reward: f64) -> Trajectory {
        let horizon = latents.len() - 1;
        Trajectory {
            context: Context::one_hot(0, 1).unwrap(),
            latents,
            logprobs: vec![0.0; horizon],
            terminal_reward: reward,
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[2.0, 1.0], &[2.0, 1.0]) - 1.0).abs() < 1e-15);
        assert!((cosine(&[-2.0, -1.0], &[2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn cosine_series_ends_at_one() {
        let t = traj_from(vec![vec![-1.0, 0.2], vec![0.3, 0.9], vec![0.7, 0.1]], 1.0);
        let sim = similarity_series(&t, SimilarityMetric::Cosine, None).unwrap();
        assert_eq!(sim.len(), 3);
        assert_eq!(sim[2], 1.0);
        assert!(sim.iter().all(|s| (-1.0..=1.0).contains(s)));
    }

    #[test]
    fn l2_series_is_negated_distance() {
        let t = traj_from(vec![vec![3.0, 4.0], vec![0.0, 0.0]], 1.0);
        let sim = similarity_series(&t, SimilarityMetric::L2, None).unwrap();
        assert_eq!(sim, vec![-5.0, -0.0]);
    }

    #[test]
    fn reward_metric_requires_probe() {
        let t = traj_from(vec![vec![3.0, 4.0], vec![0.0, 0.0]], 1.0);
        assert!(similarity_series(&t, SimilarityMetric::Reward, None).is_err());
    }

    #[test]
    fn window_smoothing_worked_example() {
        let sim = [0.05, 0.1, 0.2, 0.3, 0.4];
        let (means, inc) = window_smooth(&sim, 2).unwrap();
        assert!((means[0] - 0.15).abs() < 1e-15 && (means[1] - 0.35).abs() < 1e-15);
        assert!((inc[0] - 0.10).abs() < 1e-15 && (inc[1] - 0.20).abs() < 1e-15);
    }

    #[test]
    fn unit_window_gives_raw_increments() {
        let sim = [0.3, -0.1, 0.5, 0.45, 1.0];
        let (means, inc) = window_smooth(&sim, 1).unwrap();
        assert_eq!(means, sim[1..].to_vec());
        for (i, d) in inc.iter().enumerate() {
            assert_eq!(*d, sim[i + 1] - sim[i]);
        }
    }

    #[test]
    fn constant_series_has_no_progress() {
        let (_, inc) = window_smooth(&[0.4; 7], 3).unwrap();
        assert!(inc.iter().all(|d| d.abs() < 1e-15));
        assert!(matches!(
            contribution_weights(&inc, 3, 6, WeightOptions::default()),
            Err(CocaError::DegenerateDenominator(_))
        ));
    }

    #[test]
    fn partial_last_window() {
        let r = window_ranges(7, 3).unwrap();
        assert_eq!(r, vec![0..3, 3..6, 6..7]);
        let sim = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 1.0];
        let (means, _) = window_smooth(&sim, 3).unwrap();
        assert_eq!(means.len(), 3);
        assert_eq!(means[2], 1.0);
    }

    #[test]
    fn window_bounds_are_checked() {
        assert!(window_smooth(&[0.0, 1.0], 0).is_err());
        assert!(window_smooth(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn weights_worked_example() {
        let w = contribution_weights(&[0.10, 0.20], 2, 4, WeightOptions::default()).unwrap();
        let expected = [1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let literal = WeightOptions { norm: WeightNorm::PerWindow, ..Default::default() };
        let w = contribution_weights(&[0.10, 0.20], 2, 4, literal).unwrap();
        let expected = [1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn skip_first_denominator() {
        let opts = WeightOptions { denominator: Denominator::SkipFirstWindow, ..Default::default() };
        let w = contribution_weights(&[0.10, 0.20], 2, 4, opts).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_window_and_equal_increments_are_uniform() {
        let w = contribution_weights(&[0.7], 5, 5, WeightOptions::default()).unwrap();
        assert!(w.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let w = contribution_weights(&[0.2, 0.2, 0.2], 2, 6, WeightOptions::default()).unwrap();
        assert!(w.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn negative_increments_give_negative_weights() {
        let w = contribution_weights(&[0.6, -0.2], 1, 2, WeightOptions::default()).unwrap();
        assert!((w[0] - 1.5).abs() < 1e-15 && (w[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_profile_falls_back_to_uniform() {
        // x_T already equals x_0 in direction: all similarities are 1.
        let t = traj_from(vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]], 1.0);
        let p = contribution_profile(&t, SimilarityMetric::Cosine, 1, WeightOptions::default(), None).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn redistribute_examples() {
        let uca = redistribute(2.0, 4, None, Method::Uca, 0.0).unwrap();
        assert_eq!(uca.per_step, vec![0.5; 4]);

        let w = [1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0];
        let coca = redistribute(3.0, 4, Some(&w), Method::Coca, 0.0).unwrap();
        for (a, b) in coca.per_step.iter().zip([0.5, 0.5, 1.0, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((coca.per_step.iter().sum::<f64>() - 3.0).abs() < 1e-12);

        let sparse = redistribute(3.0, 4, None, Method::Sparse, 0.0).unwrap();
        assert_eq!(sparse.per_step, vec![0.0, 0.0, 0.0, 3.0]);
        let mix0 = redistribute(3.0, 4, Some(&w), Method::BetaMix, 0.0).unwrap();
        assert_eq!(mix0.per_step, sparse.per_step);
        let mix1 = redistribute(3.0, 4, Some(&w), Method::BetaMix, 1.0).unwrap();
        assert_eq!(mix1.per_step, coca.per_step);
        let half = redistribute(3.0, 4, Some(&w), Method::BetaMix, 0.5).unwrap();
        assert!((half.per_step[0] - 0.25).abs() < 1e-15);
        assert!((half.per_step[3] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn redistribute_errors() {
        assert!(redistribute(1.0, 3, None, Method::Coca, 0.0).is_err());
        assert!(redistribute(1.0, 3, Some(&[0.5, 0.5]), Method::Coca, 0.0).is_err());
        assert!(redistribute(1.0, 2, Some(&[0.5, 0.5]), Method::BetaMix, 1.5).is_err());
        assert!("nope".parse::<Method>().is_err());
    }
}
