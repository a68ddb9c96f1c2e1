use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value falls outside the domain an operation accepts.
    #[error("{what}: value {value} out of range {range}")]
    Range {
        what: &'static str,
        value: i64,
        range: &'static str,
    },

    /// Caller supplied arguments that can never be valid.
    #[error("invalid usage: {0}")]
    Usage(String),

    /// Input data is malformed (non-finite values, inconsistent metadata, ...).
    #[error("invalid data: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing tensor `{tensor}` for layer `{layer}` ({})", path.display())]
    MissingTensor {
        layer: String,
        tensor: String,
        path: PathBuf,
    },

    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),

    #[error("row {row}, group {group}: {source}")]
    AtGroup {
        row: usize,
        group: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True when the error stems from how the operation was invoked rather
    /// than from the data it was given.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Usage(_) => true,
            Error::AtGroup { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}
