use thiserror::Error;

/// Errors produced across the lab. Each variant maps to a stable
/// machine-readable category used by the CLI; messages omit the category.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("invalid input at position {position}: {reason}")]
    Input { position: usize, reason: String },

    #[error("{0}")]
    Domain(String),

    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Dataset(String),

    #[error("{0}")]
    Divergence(String),

    #[error("cannot encode character {0:?}: not in vocabulary")]
    Encoding(char),

    #[error("{0}")]
    Checkpoint(String),

    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Input { .. } => "input",
            Error::Domain(_) => "domain",
            Error::Usage(_) => "usage",
            Error::Dataset(_) => "dataset",
            Error::Divergence(_) => "divergence",
            Error::Encoding(_) => "encoding",
            Error::Checkpoint(_) => "checkpoint",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
