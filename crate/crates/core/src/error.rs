use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("mask constraint unsatisfied after {attempts} attempts: {constraint}")]
    MaskConstraint { constraint: String, attempts: usize },

    #[error(
        "only {found} matches pass the confidence threshold {threshold} (need at least 4); \
         fall back to an irregular mask"
    )]
    NotEnoughMatches { found: usize, threshold: f64 },

    #[error("unknown task prompt `{0}`")]
    UnknownTask(String),

    #[error("layer {index} out of range ({count} layers)")]
    MissingLayer { index: usize, count: usize },

    #[error("adapter already merged into `{0}`")]
    AlreadyMerged(String),

    #[error("denoiser failure: {0}")]
    Model(String),

    #[error("metric plug-in `{name}` failed: {message}")]
    Plugin { name: String, message: String },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidValue(msg.into())
    }
}
