use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("row {index:?} has zero L2 norm and cannot be normalized")]
    ZeroNormRow { index: Vec<usize> },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("mechanism {0} needs a second query/key view")]
    MissingSecondView(&'static str),

    #[error("sequence of length {len} exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("passkey target length {target} is below the minimum of {min} tokens")]
    TargetTooSmall { target: usize, min: usize },

    #[error("malformed passkey prompt: {0}")]
    MalformedPrompt(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
