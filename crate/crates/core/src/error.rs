use thiserror::Error;

/// Errors produced by the fitting engine and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("landmark count mismatch: expected {expected}, found {found}")]
    LandmarkCountMismatch { expected: usize, found: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("alignment is degenerate: {0}")]
    AlignmentDegenerate(String),

    #[error("not enough training data: {0}")]
    InsufficientData(String),

    #[error("patch has no response mass")]
    ZeroEvidence,

    #[error("initialization system is singular: {0}")]
    InitDegenerate(String),

    #[error("parameter update system is not positive definite")]
    SingularSystem,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("could not place scenario on canvas after {0} attempts")]
    ScenarioPlacement(usize),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("malformed {format}: {message}")]
    Format {
        format: &'static str,
        message: String,
    },

    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(format: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            format,
            message: message.into(),
        }
    }
}
