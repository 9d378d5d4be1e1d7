use thiserror::Error;

/// Errors produced anywhere in the forecasting engine.
#[derive(Debug, Error)]
pub enum StlinkError {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("zero-length input")]
    EmptyInput,

    #[error("head dimension must be even (got {0})")]
    OddHeadDim(usize),

    #[error("dimension must be divisible by 4 for spatial rotation (got {0})")]
    SpatialDimNotDivisibleBy4(usize),

    #[error("non-invertible affine: gamma[{index}] == 0")]
    NonInvertibleAffine { index: usize },

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: String, expected: String, got: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite objective when perturbing parameter {param}[{index}]")]
    NonFiniteObjective { param: String, index: usize },

    #[error("index out of range: {what} = {index}, limit {limit}")]
    IndexOutOfRange { what: String, index: usize, limit: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("non-uniform interval at row {0}")]
    NonUniformInterval(usize),

    #[error("split too short: {name} has {len} steps, need at least {need}")]
    SplitTooShort { name: &'static str, len: usize, need: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("contradictory ablation flags: {0}")]
    ContradictoryAblation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StlinkError>;

pub(crate) fn shape_err(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> StlinkError {
    StlinkError::ShapeMismatch { what: what.into(), expected: expected.to_string(), got: got.to_string() }
}
