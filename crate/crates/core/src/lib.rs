//! Contribution-based credit assignment for policy-gradient fine-tuning of a
//! small conditional diffusion model.
//!
//! The denoising chain is treated as a finite-horizon MDP. A single terminal
//! reward is spread over the denoising steps in proportion to how much each
//! window of steps moved the latent toward the final sample, normalized in
//! two stages and optimized with a clipped surrogate objective.

pub mod credit;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod mdp;
pub mod norm;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod shaping;
pub mod trainer;

pub use credit::{ContributionProfile, Denominator, Method, SimilarityMetric, WeightNorm, WeightOptions};
pub use denoiser::DenoiserParams;
pub use diffusion::{Context, MixtureConfig};
pub use error::{CocaError, Result};
pub use mdp::{RewardFn, RewardKind, Trajectory};
pub use schedule::NoiseSchedule;
pub use trainer::{train, RunLog, RunStatus, TrainConfig, TrainEnv};
