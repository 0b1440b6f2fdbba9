use thiserror::Error;

/// Errors raised anywhere in the detection head, its training loop or the harness.
#[derive(Debug, Error)]
pub enum CsdnError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("softmax row {row} has no allowed entries")]
    DegenerateRow { row: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("infeasible assignment: {rows} predictions cannot cover {cols} ground truths")]
    Infeasible { rows: usize, cols: usize },

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("parameter {name}: {reason}")]
    ShapeMismatch { name: String, reason: String },
    #[error("trailing bytes after last record: {0}")]
    TrailingBytes(usize),
    #[error("embedded config is invalid: {0}")]
    Config(String),
}

pub type Result<T, E = CsdnError> = std::result::Result<T, E>;
