use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CocaError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} out of range 1..={horizon}")]
    TimestepOutOfRange { t: usize, horizon: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("cumulative alpha is zero at timestep {0}")]
    ZeroAlphaBar(usize),

    #[error("reverse-process standard deviation is zero at timestep {0}")]
    ZeroSigma(usize),

    #[error("rollout diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("unknown {what}: {name}")]
    UnknownKind { what: &'static str, name: String },

    #[error("invalid window size {window} for horizon {horizon}")]
    InvalidWindow { window: usize, horizon: usize },

    #[error("degenerate contribution denominator {0:e}")]
    DegenerateDenominator(f64),

    #[error("method/weights mismatch: {0}")]
    MethodMismatch(String),

    #[error("normalization needs {needed} entries, got {actual}")]
    TooFewSamples { needed: usize, actual: usize },

    #[error("non-finite importance ratio at trajectory {trajectory}, step {step}")]
    NonFiniteRatio { trajectory: usize, step: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid potential: {0}")]
    InvalidPotential(String),

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
}

pub type Result<T> = std::result::Result<T, CocaError>;
