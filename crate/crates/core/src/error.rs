use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("prime table bound {0} is below 2, table would be empty")]
    EmptyTable(u64),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("p = {p} {} the conductor {conductor}; wrong a_p routine", if *.divides { "divides" } else { "does not divide" })]
    WrongDispatch { p: u64, conductor: u64, divides: bool },

    #[error("curve {label}: {source}")]
    Curve {
        label: String,
        #[source]
        source: Box<Error>,
    },

    #[error("arithmetic failure: {0}")]
    Arithmetic(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("training aborted: {reason}")]
    Aborted {
        reason: String,
        manifest: Box<crate::training::RunManifest>,
    },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (this reader understands version {supported})")]
    Version { found: u16, supported: u16 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("empty data set: {0}")]
    Empty(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn with_label(self, label: &str) -> Error {
        Error::Curve {
            label: label.to_string(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping curve-label wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Curve { source, .. } => source.root(),
            other => other,
        }
    }
}
