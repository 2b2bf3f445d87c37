use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("vocabulary error: id {id} out of range for inventory of size {size}")]
    Vocabulary { id: usize, size: usize },
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("sampling error: requested {requested} but only {eligible} eligible entries")]
    Sampling { requested: usize, eligible: usize },
    #[error("augmentation error: {0}")]
    Augmentation(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("non-finite value in loss component {component}")]
    Numerical { component: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 usage, 3 data/format, 4 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical { .. } => 4,
            Error::Usage(_) | Error::Config(_) | Error::Contract(_) => 2,
            _ => 3,
        }
    }
}
