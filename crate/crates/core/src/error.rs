use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: String,
        got: String,
    },

    #[error("empty softmax")]
    EmptySoftmax,

    #[error("empty sequence")]
    EmptySequence,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite objective when probing {0}")]
    NonFinite(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("no queries")]
    NoQueries,

    #[error("no relevant candidates")]
    NoRelevant,

    #[error("missing gold label for {0}")]
    MissingLabel(String),

    #[error("missing IR rank for {0}")]
    MissingIrRank(String),

    #[error("corrupt checkpoint at byte {offset}: {message}")]
    Checkpoint { offset: u64, message: String },

    #[error("unsupported checkpoint format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("pretrained tensors do not match the target architecture: {}", .0.join(", "))]
    TransferMismatch(Vec<String>),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("model has no attention")]
    NoAttention,

    #[error("corpus is already augmented")]
    AlreadyAugmented,

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
