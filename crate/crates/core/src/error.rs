use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("shape {shape:?} requires {expected} values, got {found}")]
    ValueCount {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("train-mode batch normalization needs at least 2 examples, got {0}")]
    BatchTooSmall(usize),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("invalid length range {min}..={max}")]
    InvalidRange { min: usize, max: usize },

    #[error("all attention positions are masked")]
    AllMasked,

    #[error("{what} mismatch: expected {expected}, found {found}")]
    DimMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("line count mismatch: {left} lines in {left_name} vs {right} lines in {right_name}")]
    LineCountMismatch {
        left_name: String,
        left: usize,
        right_name: String,
        right: usize,
    },

    #[error("attention trace covers {trace} steps but the hypothesis has {hyp} tokens")]
    MissingTrace { trace: usize, hyp: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
