use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// (rows, cols)
pub type Shape = (usize, usize);

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("loss function is not deterministic: {first} != {second} at identical input")]
    NonDeterministic { first: f64, second: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("batch too small: need at least {min} rows, got {got}")]
    BatchTooSmall { min: usize, got: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    TrainingDiverged {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
