use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] ctxpaint_core::Error),

    #[error("tensor op failed: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("backbone fingerprint mismatch: checkpoint expects {expected}, backbone has {found}")]
    Fingerprint { expected: String, found: String },

    #[error("non-finite loss at step {step} (t={t}, seed={seed}, |z_t|={z_norm}); reproduction bundle in {bundle}")]
    NonFinite {
        step: u64,
        t: usize,
        seed: u64,
        z_norm: f64,
        bundle: PathBuf,
    },

    #[error("unknown probe layer `{name}`; available: {available}")]
    UnknownProbe { name: String, available: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Error {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Whether the failure stems from user input rather than the run itself.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Manifest { .. }
            | Error::Config(_)
            | Error::Format { .. }
            | Error::Fingerprint { .. }
            | Error::UnknownProbe { .. } => true,
            Error::Io { source, .. } => matches!(
                source.kind(),
                std::io::ErrorKind::NotFound
                    | std::io::ErrorKind::PermissionDenied
                    | std::io::ErrorKind::InvalidData
            ),
            Error::Core(e) => matches!(
                e,
                ctxpaint_core::Error::Shape(_)
                    | ctxpaint_core::Error::InvalidValue(_)
                    | ctxpaint_core::Error::EmptyMask(_)
                    | ctxpaint_core::Error::UnknownTask(_)
                    | ctxpaint_core::Error::NotEnoughMatches { .. }
            ),
            _ => false,
        }
    }
}

impl From<Error> for ctxpaint_core::Error {
    fn from(e: Error) -> Self {
        match e {
            Error::Core(inner) => inner,
            other => ctxpaint_core::Error::Model(other.to_string()),
        }
    }
}
