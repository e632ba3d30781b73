use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unsupported language code `{0}`")]
    UnknownLang(String),

    #[error("language mismatch: expected `{expected}`, found `{found}`")]
    LangMismatch { expected: String, found: String },

    #[error("invalid dictionary entry `{key}`: {message}")]
    DictionarySchema { key: String, message: String },

    #[error("cannot freeze an empty noise dictionary")]
    EmptyDictionary,

    #[error("invalid configuration `{field}`: {message}")]
    Config { field: &'static str, message: String },

    #[error("invalid example `{id}`: {message}")]
    InvalidExample { id: String, message: String },

    #[error("no prediction for example `{0}`")]
    MissingPrediction(String),

    #[error("metric keys differ: {0}")]
    MetricKeys(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
