use thiserror::Error;

pub type Result<T, E = FedError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("loss became non-finite ({0}); the learning rate is likely too large")]
    NonFiniteLoss(String),

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("knowledge distillation requires a non-empty distillation dataset")]
    NoKdData,

    #[error("unknown mode `{0}`")]
    UnknownMode(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("csv parse error: {0}")]
    Parse(String),

    #[error("target column `{0}` not found")]
    MissingTarget(String),

    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },

    #[error("feature {0} is constant; correlation is undefined")]
    DegenerateFeature(usize),

    #[error("client {0} received no data points")]
    EmptyClient(usize),

    #[error("empty input")]
    EmptyInput,

    #[error("need at least {needed} non-zero paired differences, got {got}")]
    TooFewPairs { needed: usize, got: usize },

    #[error("message codec: {0}")]
    Codec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
