use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("too many rejected rows: {rejected} of {total}")]
    TooManyRejects { rejected: usize, total: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty training split after filtering")]
    EmptyTrainSplit,
    #[error("invalid plus code precision {0}, expected one of 2, 4, 6, 8, 10")]
    InvalidPrecision(usize),
    #[error("invalid plus code `{0}`")]
    InvalidCode(String),
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar root, got {0}x{1}")]
    NonScalarRoot(usize, usize),
    #[error("unknown {kind} `{key}`")]
    Unknown { kind: &'static str, key: String },
    #[error("duplicate poi id `{0}`")]
    DuplicatePoi(String),
    #[error("malformed semantic id `{0}`")]
    MalformedSid(String),
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
