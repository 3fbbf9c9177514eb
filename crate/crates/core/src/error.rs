use thiserror::Error;

use crate::margin::Variant;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} is outside its domain")]
    Domain { what: &'static str, value: f64 },

    #[error("variant {0:?} needs a per-sample quality value")]
    MissingQuality(Variant),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("norm statistics used before the first update")]
    UninitializedStats,

    #[error("embedding row {0} has zero norm")]
    ZeroNorm(usize),

    #[error("forward state does not belong to the current parameters")]
    StaleForward,

    #[error("fused feature is degenerate (zero vector)")]
    DegenerateFusion,

    #[error("input has zero variance")]
    ZeroVariance,

    #[error("protocol has no impostor / unenrolled entries")]
    NoImpostors,

    #[error("k = {k} exceeds gallery size {gallery}")]
    RankTooLarge { k: usize, gallery: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
