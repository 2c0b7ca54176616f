//! Toy DDPM: data mixture, closed-form forward noising, the reverse-process
//! mean, x0 reconstruction and the noise-prediction pretraining loss.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserParams;
use crate::error::{CocaError, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{stream_rng, Stream};
use crate::schedule::NoiseSchedule;

/// Conditioning signal. The embedding is a one-hot code over the context count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub id: usize,
    pub embedding: Vec<f64>,
}

impl Context {
    pub fn one_hot(id: usize, count: usize) -> Result<Self> {
        if id >= count {
            return Err(CocaError::InvalidConfig(format!("context id {id} >= count {count}")));
        }
        let mut embedding = vec![0.0; count];
        embedding[id] = 1.0;
        Ok(Self { id, embedding })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub x0: Vec<f64>,
    pub context: Context,
}

/// Mixture of isotropic Gaussians with means evenly spaced on a circle in
/// the first two coordinates. Mode `k` is also context `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub dim: usize,
    pub modes: usize,
    pub radius: f64,
    pub std: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self { dim: 2, modes: 4, radius: 3.0, std: 0.2 }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(CocaError::InvalidConfig("data dimension must be at least 2".into()));
        }
        if self.modes == 0 {
            return Err(CocaError::InvalidConfig("need at least one mode".into()));
        }
        if !(self.radius.is_finite() && self.std.is_finite() && self.std >= 0.0) {
            return Err(CocaError::InvalidConfig("radius/std must be finite, std >= 0".into()));
        }
        Ok(())
    }

    pub fn mode_mean(&self, k: usize) -> Vec<f64> {
        let angle = 2.0 * PI * k as f64 / self.modes as f64;
        let mut m = vec![0.0; self.dim];
        m[0] = self.radius * angle.cos();
        m[1] = self.radius * angle.sin();
        m
    }

    pub fn context(&self, id: usize) -> Result<Context> {
        Context::one_hot(id, self.modes)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DataPoint {
        let k = rng.random_range(0..self.modes);
        let x0 = self.mode_mean(k).into_iter().map(|m| m + self.std * rng.sample::<f64, _>(StandardNormal)).collect();
        DataPoint { x0, context: Context::one_hot(k, self.modes).expect("k < modes") }
    }
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(CocaError::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn forward_noise(x0: &[f64], t: usize, schedule: &NoiseSchedule, noise: &[f64]) -> Result<Vec<f64>> {
    check_dim(x0.len(), noise.len())?;
    let ab = schedule.alpha_bar_at(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, n)| a * x + b * n).collect())
}

/// `1/sqrt(alpha_t) (x_t - beta_t / sqrt(1 - abar_t) eps)`.
pub fn reverse_mean(x_t: &[f64], t: usize, eps_pred: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dim(x_t.len(), eps_pred.len())?;
    let i = schedule.check_timestep(t)?;
    let (alpha, beta, ab) = (schedule.alpha[i], schedule.beta[i], schedule.alpha_bar[i]);
    let k = beta / (1.0 - ab).sqrt();
    let s = 1.0 / alpha.sqrt();
    Ok(x_t.iter().zip(eps_pred).map(|(x, e)| s * (x - k * e)).collect())
}

/// `d mu / d eps`, a scalar multiple of the identity.
pub fn reverse_mean_eps_jacobian(t: usize, schedule: &NoiseSchedule) -> Result<f64> {
    let i = schedule.check_timestep(t)?;
    Ok(-schedule.beta[i] / ((1.0 - schedule.alpha_bar[i]).sqrt() * schedule.alpha[i].sqrt()))
}

/// Inverts the closed-form forward sample for x0.
pub fn predict_x0(x_t: &[f64], t: usize, eps_pred: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dim(x_t.len(), eps_pred.len())?;
    let ab = schedule.alpha_bar_at(t)?;
    if ab <= 0.0 {
        return Err(CocaError::ZeroAlphaBar(t));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.iter().zip(eps_pred).map(|(x, e)| (x - b * e) / a).collect())
}

/// Normalized timestep fed to the network.
pub fn timestep_feature(t: usize, schedule: &NoiseSchedule) -> f64 {
    t as f64 / schedule.horizon() as f64
}

/// One fully specified term of the noise-prediction objective.
#[derive(Debug, Clone)]
pub struct DenoisingSample<'a> {
    pub x0: &'a [f64],
    pub context: &'a Context,
    pub t: usize,
    pub noise: Vec<f64>,
}

/// Mean over samples of `|| noise - eps(x_t, t, c) ||^2` and its gradient.
pub fn denoising_loss(
    params: &DenoiserParams,
    samples: &[DenoisingSample<'_>],
    schedule: &NoiseSchedule,
) -> Result<(f64, DenoiserParams)> {
    if samples.is_empty() {
        return Err(CocaError::TooFewSamples { needed: 1, actual: 0 });
    }
    let scale = 1.0 / samples.len() as f64;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    for s in samples {
        let x_t = forward_noise(s.x0, s.t, schedule, &s.noise)?;
        let (pred, cache) = params.forward(&x_t, timestep_feature(s.t, schedule), &s.context.embedding)?;
        let resid: Vec<f64> = pred.iter().zip(&s.noise).map(|(p, n)| p - n).collect();
        loss += scale * resid.iter().map(|r| r * r).sum::<f64>();
        let upstream: Vec<f64> = resid.iter().map(|r| 2.0 * scale * r).collect();
        params.backward(&cache, &upstream, &mut grad);
    }
    Ok((loss, grad))
}

/// One optimizer step on the noise-prediction loss with a uniformly drawn
/// timestep and fresh Gaussian noise per sample. Returns the pre-step loss.
pub fn pretrain_step<R: Rng + ?Sized>(
    params: &mut DenoiserParams,
    optimizer: &mut Adam,
    batch: &[DataPoint],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let samples: Vec<DenoisingSample<'_>> = batch
        .iter()
        .map(|p| DenoisingSample {
            x0: &p.x0,
            context: &p.context,
            t: rng.random_range(1..=schedule.horizon()),
            noise: (0..p.x0.len()).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect();
    let (loss, grad) = denoising_loss(params, &samples, schedule)?;
    optimizer.step(params, &grad);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 128, hidden: 32, learning_rate: 3e-3 }
    }
}

/// Seeded initialization followed by `steps` optimizer steps on fresh
/// mixture batches. Returns the parameters and the per-step losses.
pub fn pretrain(
    mixture: &MixtureConfig,
    schedule: &NoiseSchedule,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(DenoiserParams, Vec<f64>)> {
    mixture.validate()?;
    if config.batch_size == 0 || config.hidden == 0 {
        return Err(CocaError::InvalidConfig("batch size and hidden width must be positive".into()));
    }
    let mut params =
        DenoiserParams::init(mixture.dim, mixture.modes, config.hidden, &mut stream_rng(seed, Stream::Init, &[]));
    let mut adam = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() }, &params);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut rng = stream_rng(seed, Stream::Pretrain, &[step as u64]);
        let batch: Vec<DataPoint> = (0..config.batch_size).map(|_| mixture.sample(&mut rng)).collect();
        let loss = pretrain_step(&mut params, &mut adam, &batch, schedule, &mut rng)?;
        if !loss.is_finite() || !params.is_finite() {
            return Err(CocaError::Divergence { step, reason: "non-finite pretraining loss".into() });
        }
        losses.push(loss);
    }
    Ok((params, losses))
}
