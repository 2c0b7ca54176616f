//! Experiment runner for contribution-based credit assignment on the toy
//! diffusion testbed.
//!
//! Exit codes: 0 success, 1 I/O or internal error, 2 invalid input,
//! 3 divergence, 4 verification failure.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use coca::mdp::RewardKind;
use coca::{CocaError, Denominator, Method, SimilarityMetric, WeightNorm};

pub mod artifacts;
pub mod commands;
pub mod compare;
pub mod config;

/// User-facing validation failure; maps to exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Diverged,
    VerificationFailed,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Self::Success => 0,
            Self::Diverged => 3,
            Self::VerificationFailed => 4,
        }
    }
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CocaError>() {
            return match e {
                CocaError::Divergence { .. } | CocaError::NonFiniteRatio { .. } => 3,
                CocaError::InvalidSchedule(_)
                | CocaError::DimensionMismatch { .. }
                | CocaError::UnknownKind { .. }
                | CocaError::InvalidWindow { .. }
                | CocaError::MethodMismatch(_)
                | CocaError::TooFewSamples { .. }
                | CocaError::InvalidConfig(_)
                | CocaError::InvalidPotential(_)
                | CocaError::InvalidMdp(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

#[derive(Debug, Parser)]
#[command(name = "coca", version, about = "Credit assignment experiments on a toy diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the denoiser to the mixture data and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint against a terminal reward.
    Train(TrainArgs),
    /// Queries-to-threshold table across run directories.
    Compare(CompareArgs),
    /// Check optimal-policy invariance under potential shaping.
    Verify(VerifyArgs),
    /// Contribution profiles of fresh rollouts as JSON lines.
    DumpProfile(DumpProfileArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Data dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Number of mixture modes (also the number of contexts).
    #[arg(long)]
    pub modes: Option<usize>,
    #[arg(long)]
    pub data_radius: Option<f64>,
    #[arg(long)]
    pub data_std: Option<f64>,
    /// Number of denoising steps.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RewardArgs {
    #[arg(long = "reward")]
    pub reward_kind: Option<RewardKind>,
    /// Comma-separated target point for `negdist`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub target: Option<Vec<f64>>,
    #[arg(long)]
    pub ring_radius: Option<f64>,
    /// Preferred mode for `mode_preference`.
    #[arg(long)]
    pub mode: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CreditArgs {
    #[arg(long)]
    pub similarity: Option<SimilarityMetric>,
    #[arg(long)]
    pub window: Option<usize>,
    /// `per_timestep` or `per_window`.
    #[arg(long)]
    pub weight_norm: Option<WeightNorm>,
    /// `all_windows` or `skip_first_window`.
    #[arg(long)]
    pub denominator: Option<Denominator>,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path [default: <output_dir>/checkpoint.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss curve path [default: next to the checkpoint, `.loss.csv`].
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint from `pretrain`; data and schedule come from it.
    #[arg(long, required_unless_present = "replay")]
    pub checkpoint: Option<PathBuf>,
    /// Re-run the configuration and checkpoint stored in a `meta.json`.
    #[arg(long, conflicts_with_all = ["config", "checkpoint"])]
    pub replay: Option<PathBuf>,
    /// Run directory [default: the configured output_dir].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<Method>,
    /// Mixing weight for `beta_mix`.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub minibatch: Option<usize>,
    #[arg(long)]
    pub inner_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip_range: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub no_stage1: bool,
    #[arg(long)]
    pub no_stage2: bool,
    /// Write contributions.jsonl with one line per sampled trajectory.
    #[arg(long)]
    pub dump_contributions: bool,
    /// Write curve.svg.
    #[arg(long)]
    pub svg: bool,
    #[command(flatten)]
    pub credit: CreditArgs,
    #[command(flatten)]
    pub reward: RewardArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// Run directories written by `train`.
    #[arg(required = true, num_args = 2..)]
    pub runs: Vec<PathBuf>,
    /// Mean-reward threshold [default: per seed, halfway from the epoch-0
    /// mean to the best mean reached by any run with that seed].
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    /// Directory for compare_runs.csv, compare_pairs.csv, summary.txt and
    /// compare.svg.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Random MDP instances on top of the fixed checks.
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Add an action-dependent bonus to every shaped instance.
    #[arg(long)]
    pub corrupt: bool,
    /// Report path [default: stdout].
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DumpProfileArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed context id [default: drawn per rollout].
    #[arg(long)]
    pub context: Option<usize>,
    /// Output path [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub credit: CreditArgs,
    #[command(flatten)]
    pub reward: RewardArgs,
}

pub fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Train(a) => commands::train(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::DumpProfile(a) => commands::dump_profile(&a),
    }
}
