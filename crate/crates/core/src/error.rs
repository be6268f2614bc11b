use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("sample has an edge at ({row}, {col}) whose probability is fixed at zero")]
    ImpossibleSample { row: usize, col: usize },

    #[error("loss `{called}` invoked with a `{configured}` configuration")]
    ConfigMismatch {
        called: &'static str,
        configured: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite parameter detected at epoch {epoch}, step {step}: {what}")]
    NumericalDivergence {
        epoch: usize,
        step: usize,
        what: String,
    },

    #[error("enumeration needs {stochastic} stochastic edges, limit is {limit}")]
    TooManyEdges { stochastic: usize, limit: usize },

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(expected: impl ToString, actual: impl ToString) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
