use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the toolkit.
///
/// The split matters for scripting: contract violations map to exit code 1,
/// I/O and format problems to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape mismatch, bad label,
    /// batch too small, ...). The message names the offending dimension/value.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input data (PPM stream, manifest, config file).
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Checkpoint file carries an unsupported format version.
    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    /// Checkpoint file is structurally broken (bad magic, truncated record).
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    /// A stored tensor does not match the shape implied by the stored config.
    #[error("checkpoint shape mismatch for `{name}`: file has {found:?}, config implies {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    /// Training diverged; the batch index pins down where.
    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 1 for contract violations, 2 for I/O
    /// and format problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::NonFiniteLoss { .. } => 1,
            _ => 2,
        }
    }
}
