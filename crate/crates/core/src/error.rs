use thiserror::Error;

pub type Result<T, E = CloverError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CloverError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid input `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("no maskable token in text")]
    NoEligibleToken,
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("unknown token id {0}")]
    UnknownTokenId(usize),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CloverError {
    pub fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        CloverError::Invalid {
            field,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CloverError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CloverError::Shape(_) => "shape",
            CloverError::Invalid { .. } => "invalid",
            CloverError::NonFinite(_) => "non_finite",
            CloverError::DegenerateMask(_) => "degenerate_mask",
            CloverError::NoEligibleToken => "no_eligible_token",
            CloverError::UnknownToken(_) | CloverError::UnknownTokenId(_) => "unknown_token",
            CloverError::Capacity(_) => "capacity",
            CloverError::Config(_) => "config",
            CloverError::Checkpoint(_) => "checkpoint",
            CloverError::Io { .. } => "io",
            CloverError::Json(_) => "json",
        }
    }

    /// True for failures caused by numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, CloverError::NonFinite(_))
    }
}
