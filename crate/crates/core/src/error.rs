use thiserror::Error;

/// Errors produced by the quantization engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid rounding spec: {0}")]
    InvalidSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    /// The requested search exceeds the configured evaluation budget. Kept
    /// separate from `InvalidInput` so callers can retry with a larger budget.
    #[error("search-space too large: {combinations} combinations exceed budget {budget}")]
    SearchSpaceTooLarge { combinations: u128, budget: u64 },

    #[error("encoder optimization diverged at epoch {epoch}: loss {loss} > 10x initial {initial}")]
    Diverged {
        epoch: usize,
        loss: f64,
        initial: f64,
    },

    #[error("self-check failed: {0}")]
    SelfCheck(String),

    #[error("phase `{phase}` failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn in_phase(self, phase: &'static str) -> Error {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }
}
