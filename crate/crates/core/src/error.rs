use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied configuration or hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller broke an API contract (shape mismatch, stale tape, wrong grid).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The game or barrier model is inconsistent, e.g. inverted barriers.
    #[error("model error: {0}")]
    Model(String),

    #[error("numerical blow-up at step {step}: {detail}")]
    NumericalBlowup { step: usize, detail: String },

    #[error("non-finite value in {path}")]
    NonFinite { path: String },

    #[error("training diverged at stage {stage}: {detail}")]
    Training { stage: usize, detail: String },

    #[error("retrain {retrain}: {source}")]
    Retrain {
        retrain: usize,
        #[source]
        source: Box<Error>,
    },

    /// Input data that cannot be used (too short, constant, malformed).
    #[error("data error: {0}")]
    Data(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("grid coverage error: {0}")]
    Coverage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Unwraps retrain annotations to the underlying cause.
    pub fn root(&self) -> &Error {
        match self {
            Error::Retrain { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
