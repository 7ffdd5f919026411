//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid annotation record `{uid}`: {reason}")]
    InvalidRecord { uid: String, reason: String },

    #[error("entropy {0} is outside the valid domain")]
    EntropyDomain(f64),

    #[error("degenerate bins: {0}")]
    DegenerateBins(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("duplicate uid `{uid}` on line {line}")]
    DuplicateUid { uid: String, line: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid trajectory `{uid}`: {reason}")]
    InvalidTrajectory { uid: String, reason: String },

    #[error("trajectory `{uid}` has {len} checkpoints; at least 2 are required")]
    InsufficientCheckpoints { uid: String, len: usize },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("alignment error: uid `{uid}` has no value at step {step}")]
    Alignment { uid: String, step: u64 },

    #[error("log header error: {0}")]
    Header(String),

    #[error("join error: {0}")]
    Join(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("collinear design: {0}")]
    Collinearity(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("undefined effect size: {0}")]
    UndefinedEffect(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("manifest error at `{path}`: {reason}")]
    Manifest { path: String, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 for I/O and format problems,
    /// 1 for everything domain- or statistics-related.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::DuplicateUid { .. }
            | Error::Header(_)
            | Error::Alignment { .. }
            | Error::Manifest { .. }
            | Error::Format(_) => 2,
            _ => 1,
        }
    }
}
