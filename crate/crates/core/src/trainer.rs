//! Policy-gradient fine-tuning with credit-assigned step rewards.
//!
//! One epoch: sample trajectories over uniformly drawn contexts, normalize
//! terminal rewards per context, split them into step rewards, normalize the
//! step rewards per context and timestep, turn them into reward-to-go
//! coefficients and take clipped importance-weighted gradient steps.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::credit::{
    contribution_profile, redistribute, similarity_queries, ContributionProfile, Method, RewardProbe, SimilarityMetric,
    WeightOptions,
};
use crate::denoiser::DenoiserParams;
use crate::diffusion::MixtureConfig;
use crate::error::{CocaError, Result};
use crate::mdp::{rollout, score_action, RewardFn, Trajectory};
use crate::norm::{mean_std, normalize_stage1, normalize_stage2};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::rng::{stream_rng, Stream};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub similarity: SimilarityMetric,
    pub window_size: usize,
    pub beta: f64,
    pub weights: WeightOptions,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub clip_range: f64,
    pub samples_per_epoch: usize,
    pub minibatch_size: usize,
    pub inner_epochs: usize,
    pub epochs: usize,
    pub seed: u64,
    pub stage1: bool,
    pub stage2: bool,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Coca,
            similarity: SimilarityMetric::Cosine,
            window_size: 5,
            beta: 1.0,
            weights: WeightOptions::default(),
            learning_rate: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 1e-4,
            max_grad_norm: 1.0,
            clip_range: 0.2,
            samples_per_epoch: 64,
            minibatch_size: 64,
            inner_epochs: 1,
            epochs: 60,
            seed: 42,
            stage1: true,
            stage2: true,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        let bad = |m: String| Err(CocaError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.clip_range.is_nan() || self.clip_range < 0.0 {
            return bad(format!("clip range must be non-negative, got {}", self.clip_range));
        }
        if self.window_size == 0 || self.window_size > horizon {
            return bad(format!("window size {} must lie in 1..={horizon}", self.window_size));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta {} outside [0, 1]", self.beta));
        }
        if self.samples_per_epoch == 0 || self.minibatch_size == 0 || self.inner_epochs == 0 {
            return bad("sample, minibatch and inner-epoch counts must be positive".into());
        }
        if self.workers == 0 {
            return bad("worker count must be positive".into());
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm <= 0.0 {
            return bad("max gradient norm must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// The fixed problem a run fine-tunes against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEnv {
    pub schedule: NoiseSchedule,
    pub mixture: MixtureConfig,
    pub reward: RewardFn,
}

/// Ascent direction of the policy objective, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub grad: DenoiserParams,
    pub samples: usize,
}

/// `coeff[t] = sum_{t' >= t} dense[t']`.
pub fn suffix_sums(dense: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; dense.len()];
    let mut acc = 0.0;
    for (o, d) in out.iter_mut().zip(dense).rev() {
        acc += d;
        *o = acc;
    }
    out
}

/// Reward-to-go coefficients `(sum_{t' >= t} w_t') * r`.
pub fn reward_to_go(weights: &[f64], terminal_reward: f64) -> Vec<f64> {
    suffix_sums(weights).into_iter().map(|s| s * terminal_reward).collect()
}

/// `(1/|batch|) sum_tau sum_t coeff_t(tau) grad log pi(a_t | s_t)`.
pub fn estimate_policy_gradient(
    batch: &[Trajectory],
    coefficients: &[Vec<f64>],
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
) -> Result<GradientEstimate> {
    if batch.len() != coefficients.len() {
        return Err(CocaError::DimensionMismatch { expected: batch.len(), actual: coefficients.len() });
    }
    let mut grad = params.zeros_like();
    for (traj, coeff) in batch.iter().zip(coefficients) {
        if coeff.len() != traj.horizon() || traj.horizon() != schedule.horizon() {
            return Err(CocaError::DimensionMismatch { expected: traj.horizon(), actual: coeff.len() });
        }
        for (k, c) in coeff.iter().enumerate() {
            if *c != 0.0 {
                score_action(params, &traj.state(k), traj.action(k), schedule)?.accumulate(params, *c, &mut grad);
            }
        }
    }
    if !batch.is_empty() {
        grad.scale(1.0 / batch.len() as f64);
    }
    Ok(GradientEstimate { grad, samples: batch.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoMetrics {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    /// Mean pre-clipping gradient norm over optimizer steps.
    pub grad_norm: f64,
    pub updates: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PpoSettings {
    pub clip_range: f64,
    pub minibatch_size: usize,
    pub inner_epochs: usize,
    pub max_grad_norm: f64,
}

/// Gradient of the clipped surrogate over `indices`, plus ratio statistics
/// `(ratio sum, clipped count, step count)`.
pub fn clipped_surrogate_gradient(
    params: &DenoiserParams,
    batch: &[Trajectory],
    coefficients: &[Vec<f64>],
    indices: &[usize],
    clip_range: f64,
    schedule: &NoiseSchedule,
) -> Result<(DenoiserParams, f64, usize, usize)> {
    let mut grad = params.zeros_like();
    let (mut ratio_sum, mut clipped, mut steps) = (0.0, 0, 0);
    for &i in indices {
        let traj = &batch[i];
        for (k, &adv) in coefficients[i].iter().enumerate() {
            let scored = score_action(params, &traj.state(k), traj.action(k), schedule)?;
            let ratio = (scored.logprob - traj.logprobs[k]).exp();
            if !ratio.is_finite() {
                return Err(CocaError::NonFiniteRatio { trajectory: i, step: k });
            }
            ratio_sum += ratio;
            steps += 1;
            if (ratio - 1.0).abs() > clip_range {
                clipped += 1;
            }
            let clipped_ratio = ratio.clamp(1.0 - clip_range, 1.0 + clip_range);
            // min(r A, clip(r) A): the unclipped branch carries the gradient
            // when it is the smaller one (ties included).
            if ratio * adv <= clipped_ratio * adv {
                scored.accumulate(params, ratio * adv, &mut grad);
            }
        }
    }
    if !indices.is_empty() {
        grad.scale(1.0 / indices.len() as f64);
    }
    Ok((grad, ratio_sum, clipped, steps))
}

/// Minibatch passes maximizing the clipped importance-weighted objective.
/// `batch[i].logprobs` must be the log-probabilities recorded at sampling.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<R: Rng + ?Sized>(
    params: &mut DenoiserParams,
    optimizer: &mut Adam,
    batch: &[Trajectory],
    coefficients: &[Vec<f64>],
    settings: PpoSettings,
    schedule: &NoiseSchedule,
    shuffle_rng: &mut R,
) -> Result<PpoMetrics> {
    if batch.len() != coefficients.len() {
        return Err(CocaError::DimensionMismatch { expected: batch.len(), actual: coefficients.len() });
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let (mut ratio_sum, mut clipped, mut steps) = (0.0, 0usize, 0usize);
    let (mut norm_sum, mut updates) = (0.0, 0usize);
    for _ in 0..settings.inner_epochs {
        order.shuffle(shuffle_rng);
        for chunk in order.chunks(settings.minibatch_size.max(1)) {
            let (mut grad, rs, c, n) =
                clipped_surrogate_gradient(params, batch, coefficients, chunk, settings.clip_range, schedule)?;
            ratio_sum += rs;
            clipped += c;
            steps += n;
            norm_sum += clip_grad_norm(&mut grad, settings.max_grad_norm);
            grad.scale(-1.0);
            optimizer.step(params, &grad);
            updates += 1;
        }
    }
    let steps_f = steps.max(1) as f64;
    Ok(PpoMetrics {
        mean_ratio: ratio_sum / steps_f,
        clip_fraction: clipped as f64 / steps_f,
        grad_norm: norm_sum / updates.max(1) as f64,
        updates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Cumulative reward-function evaluations including this epoch's.
    pub reward_queries: u64,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub clip_fraction: f64,
    pub degenerate_count: usize,
    pub mean_ratio: f64,
    pub grad_norm: f64,
    /// Mean terminal reward per context id; `None` when a context drew no samples.
    pub per_context_reward: Vec<Option<f64>>,
    /// Context groups of size one that skipped stage-1 normalization.
    pub singleton_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { epoch: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub entries: Vec<EpochLog>,
    pub status: RunStatus,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: RunLog,
    pub params: DenoiserParams,
}

/// Everything computed for one epoch before the update, for observers.
#[derive(Debug)]
pub struct EpochTrace<'a> {
    pub epoch: usize,
    pub trajectories: &'a [Trajectory],
    /// Present when the method uses weights or the metric costs no queries.
    pub profiles: &'a [Option<ContributionProfile>],
    /// Terminal rewards after stage 1.
    pub advantages: &'a [f64],
    pub coefficients: &'a [Vec<f64>],
}

pub fn train(config: &TrainConfig, env: &TrainEnv, pretrained: &DenoiserParams) -> Result<TrainOutcome> {
    train_with_observer(config, env, pretrained, |_| {})
}

fn sample_epoch(
    config: &TrainConfig,
    env: &TrainEnv,
    params: &DenoiserParams,
    epoch: usize,
    want_profiles: bool,
) -> Vec<Result<(Trajectory, Option<ContributionProfile>)>> {
    let one = |i: usize| -> Result<(Trajectory, Option<ContributionProfile>)> {
        let mut rng = stream_rng(config.seed, Stream::Rollout, &[epoch as u64, i as u64]);
        let ctx = env.mixture.context(rng.random_range(0..env.mixture.modes))?;
        let traj = rollout(params, &ctx, &env.schedule, &env.reward, &mut rng)?;
        let profile = if want_profiles {
            let probe = RewardProbe { reward: &env.reward, params, schedule: &env.schedule };
            Some(contribution_profile(&traj, config.similarity, config.window_size, config.weights, Some(probe))?)
        } else {
            None
        };
        Ok((traj, profile))
    };
    let n = config.samples_per_epoch;
    if config.workers <= 1 {
        (0..n).map(one).collect()
    } else {
        // Indexed collect keeps worker-index order regardless of scheduling.
        (0..n).into_par_iter().map(one).collect()
    }
}

fn group_by_context(trajectories: &[Trajectory]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in trajectories.iter().enumerate() {
        groups.entry(t.context.id).or_default().push(i);
    }
    groups
}

pub fn train_with_observer<F>(
    config: &TrainConfig,
    env: &TrainEnv,
    pretrained: &DenoiserParams,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochTrace<'_>),
{
    let horizon = env.schedule.horizon();
    config.validate(horizon)?;
    env.mixture.validate()?;
    if pretrained.data_dim != env.mixture.dim || pretrained.context_dim != env.mixture.modes {
        return Err(CocaError::InvalidConfig(format!(
            "checkpoint shape (d={}, contexts={}) does not match data (d={}, contexts={})",
            pretrained.data_dim, pretrained.context_dim, env.mixture.dim, env.mixture.modes
        )));
    }
    let pool = if config.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.workers)
                .build()
                .map_err(|e| CocaError::InvalidConfig(format!("worker pool: {e}")))?,
        )
    } else {
        None
    };

    let mut params = pretrained.clone();
    let mut optimizer = Adam::new(config.adam(), &params);
    let mut entries = Vec::with_capacity(config.epochs);
    let mut queries: u64 = 0;
    let needs_weights = config.method.needs_weights();
    let want_profiles = needs_weights || config.similarity != SimilarityMetric::Reward;
    let settings = PpoSettings {
        clip_range: config.clip_range,
        minibatch_size: config.minibatch_size,
        inner_epochs: config.inner_epochs,
        max_grad_norm: config.max_grad_norm,
    };

    for epoch in 0..config.epochs {
        let sampled = match &pool {
            Some(pool) => pool.install(|| sample_epoch(config, env, &params, epoch, want_profiles)),
            None => sample_epoch(config, env, &params, epoch, want_profiles),
        };
        let mut trajectories = Vec::with_capacity(sampled.len());
        let mut profiles = Vec::with_capacity(sampled.len());
        for item in sampled {
            match item {
                Ok((t, p)) => {
                    trajectories.push(t);
                    profiles.push(p);
                }
                Err(CocaError::Divergence { step, reason }) => {
                    let reason = format!("rollout diverged at step {step}: {reason}");
                    return Ok(diverged(entries, params, epoch, reason));
                }
                Err(e) => return Err(e),
            }
        }
        queries += trajectories.len() as u64;
        if want_profiles {
            queries += (trajectories.len() * similarity_queries(config.similarity, horizon)) as u64;
        }

        let rewards: Vec<f64> = trajectories.iter().map(|t| t.terminal_reward).collect();
        let (mean_reward, std_reward) = mean_std(&rewards);
        let groups = group_by_context(&trajectories);
        let per_context_reward = (0..env.mixture.modes)
            .map(|c| groups.get(&c).map(|idx| idx.iter().map(|&i| rewards[i]).sum::<f64>() / idx.len() as f64))
            .collect();

        // Stage 1: per-context standardization of terminal rewards.
        let mut advantages = rewards.clone();
        let mut singleton_groups = 0;
        if config.stage1 {
            for idx in groups.values() {
                if idx.len() < 2 {
                    singleton_groups += 1;
                    continue;
                }
                let group: Vec<f64> = idx.iter().map(|&i| rewards[i]).collect();
                let (z, _) = normalize_stage1(&group)?;
                for (&i, v) in idx.iter().zip(z) {
                    advantages[i] = v;
                }
            }
        }

        // Redistribution of the (normalized) terminal reward.
        let mut degenerate_count = 0;
        let mut dense = Vec::with_capacity(trajectories.len());
        for (adv, profile) in advantages.iter().zip(&profiles) {
            let weights = match profile {
                Some(p) if needs_weights => {
                    degenerate_count += usize::from(p.degenerate);
                    Some(p.weights.as_slice())
                }
                _ => None,
            };
            dense.push(redistribute(*adv, horizon, weights, config.method, config.beta)?.per_step);
        }

        // Stage 2: per-context, per-timestep standardization of step rewards.
        if config.stage2 && horizon >= 2 {
            for idx in groups.values() {
                let block: Vec<Vec<f64>> = idx.iter().map(|&i| dense[i].clone()).collect();
                let (z, _) = normalize_stage2(&block)?;
                for (&i, row) in idx.iter().zip(z) {
                    dense[i] = row;
                }
            }
        }
        let coefficients: Vec<Vec<f64>> = dense.iter().map(|d| suffix_sums(d)).collect();

        observer(&EpochTrace {
            epoch,
            trajectories: &trajectories,
            profiles: &profiles,
            advantages: &advantages,
            coefficients: &coefficients,
        });

        let mut shuffle = stream_rng(config.seed, Stream::Shuffle, &[epoch as u64]);
        let metrics = match ppo_update(
            &mut params,
            &mut optimizer,
            &trajectories,
            &coefficients,
            settings,
            &env.schedule,
            &mut shuffle,
        ) {
            Ok(m) => m,
            Err(e @ CocaError::NonFiniteRatio { .. }) => return Ok(diverged(entries, params, epoch, e.to_string())),
            Err(e) => return Err(e),
        };

        entries.push(EpochLog {
            epoch,
            reward_queries: queries,
            mean_reward,
            std_reward,
            clip_fraction: metrics.clip_fraction,
            degenerate_count,
            mean_ratio: metrics.mean_ratio,
            grad_norm: metrics.grad_norm,
            per_context_reward,
            singleton_groups,
        });
        if !params.is_finite() {
            return Ok(diverged(entries, params, epoch, "non-finite parameters after update".into()));
        }
    }
    Ok(TrainOutcome { log: RunLog { entries, status: RunStatus::Completed }, params })
}

fn diverged(entries: Vec<EpochLog>, params: DenoiserParams, epoch: usize, reason: String) -> TrainOutcome {
    TrainOutcome { log: RunLog { entries, status: RunStatus::Diverged { epoch, reason } }, params }
}
