use std::path::PathBuf;

/// Errors raised by the orchestration layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// Unreadable or malformed inputs: manifests, images, masks.
    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: u64 },

    /// Checkpoint content does not match its checksum or is truncated.
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    /// Checkpoint written by an unsupported format version.
    #[error("checkpoint format version {found:?} is not supported (expected {expected:?}); re-export it with a matching release")]
    Migration { found: String, expected: String },

    /// Checkpoint parameters do not fit the configured model.
    #[error("checkpoint incompatible with model: {0}")]
    Incompatible(String),

    #[error("unsupported perturbation kinds: {}", .0.join(", "))]
    Unsupported(Vec<String>),

    #[error(transparent)]
    Core(prx_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 configuration, 3 data, 4 divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Unsupported(_) | Error::Migration { .. } | Error::Incompatible(_) => 2,
            Error::Data(_) | Error::Io { .. } | Error::Integrity(_) => 3,
            Error::Divergence { .. } => 4,
            Error::Core(e) => match e {
                prx_core::Error::Config(_) | prx_core::Error::UnsupportedPerturbation(_) => 2,
                prx_core::Error::InvalidInput(_) | prx_core::Error::GenerationFailure { .. } => 3,
                prx_core::Error::Divergence { .. } => 4,
                _ => 1,
            },
        }
    }
}

impl From<prx_core::Error> for Error {
    fn from(e: prx_core::Error) -> Self {
        match e {
            prx_core::Error::Divergence { step } => Error::Divergence { step },
            prx_core::Error::Config(m) => Error::Config(m),
            other => Error::Core(other),
        }
    }
}
