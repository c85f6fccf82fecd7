use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid surface: {0}")]
    InvalidSurface(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("empty point set")]
    EmptySet,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("flow diverged at time node {node}: non-finite coordinates")]
    Divergence { node: usize },

    #[error("solver failure at iteration {iteration}: {reason}\n{dump}")]
    SolverFailure {
        iteration: usize,
        reason: String,
        dump: String,
    },

    #[error("registration {direction} failed: {source}")]
    Directional {
        direction: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("point {index} lies outside the field domain (scaled norm {norm:.3} > 4)")]
    FieldDomain { index: usize, norm: f64 },

    #[error("eigenfunction evaluation out of supported range (n = {n}, t = {t})")]
    EigenRange { n: usize, t: f64 },

    #[error("missing dissimilarity record for pair ({0}, {1})")]
    MissingPair(String, String),

    #[error("unknown surface id {0}")]
    UnknownId(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
