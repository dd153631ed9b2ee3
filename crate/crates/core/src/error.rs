use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("malformed PGM at byte {offset}: {reason}")]
    Pgm { offset: usize, reason: String },

    #[error("checkpoint rejected ({kind}) at byte {offset}: {reason}")]
    Checkpoint {
        kind: CheckpointFault,
        offset: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Which structural check a checkpoint failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointFault {
    Magic,
    Version,
    Truncated,
    Checksum,
    Utf8,
    DuplicateName,
    BadShape,
    TrailingBytes,
    Mismatch,
}

impl std::fmt::Display for CheckpointFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CheckpointFault::Magic => "magic",
            CheckpointFault::Version => "version",
            CheckpointFault::Truncated => "truncated",
            CheckpointFault::Checksum => "checksum",
            CheckpointFault::Utf8 => "utf-8",
            CheckpointFault::DuplicateName => "duplicate name",
            CheckpointFault::BadShape => "shape",
            CheckpointFault::TrailingBytes => "trailing bytes",
            CheckpointFault::Mismatch => "network mismatch",
        };
        f.write_str(s)
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
