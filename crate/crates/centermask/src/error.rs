use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid JSON at line {line}, column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("XML parse error: {0}")]
    Xml(String),

    #[error("object {index}: {message}")]
    XmlObject { index: usize, message: String },

    #[error("unknown label {label:?}; expected \"Insulator\" or \"Insulator error\"")]
    UnknownLabel { label: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate polygon: fewer than 3 distinct vertices")]
    DegeneratePolygon,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite {component} loss at iteration {iteration}")]
    NonFiniteLoss {
        component: &'static str,
        iteration: usize,
    },

    #[error("{0}")]
    Data(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(err: &serde_json::Error) -> Self {
        Error::Json {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
