use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An API was used out of order, e.g. backward on a cache from an older model.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {path}")]
    NonFinite { path: String },

    #[error("class {class} has no examples in the weighting pool")]
    MissingClass { class: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("config key `{key}`: {message}")]
    ConfigKey { key: String, message: String },

    /// ACC and FGT are undefined for fewer than two stages.
    #[error("metrics need at least 2 stages, got {0}")]
    TooFewStages(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
