//! Error type shared by every module of the crate.

use std::path::PathBuf;

use crate::quadrature::QuadratureDiagnostics;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// The data make the requested statistic undefined (zero within-group
    /// spread, identical points, ...).
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("numerical failure: {message} ({diagnostics:?})")]
    NumericalFailure {
        message: String,
        diagnostics: Option<QuadratureDiagnostics>,
    },

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
