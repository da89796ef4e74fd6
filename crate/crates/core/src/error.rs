use thiserror::Error;

/// Errors raised anywhere in the tracking pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("generative service failed after {attempts} attempt(s): {message}")]
    Service { attempts: u32, message: String },

    #[error("all {rejected} description(s) rejected at tau_val {tau_val}; best similarity {best_similarity:.6}")]
    AllRejected {
        rejected: usize,
        tau_val: f64,
        best_similarity: f64,
    },

    #[error("bag construction failed at stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("malformed entry {index}: {message}")]
    MalformedEntry { index: usize, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("tracking session is not initialized")]
    Uninitialized,

    #[error("tracking failed at frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}
