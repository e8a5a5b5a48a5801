use std::io;

/// Broad failure class, used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite result produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite loss in component `{component}`")]
    NonFiniteLoss { component: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward root is detached from every trainable leaf")]
    Detached,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("point maps to infinity")]
    PointAtInfinity,
    #[error("unknown assistant `{0}`")]
    UnknownAssistant(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("nothing to evaluate: {0}")]
    EmptyInput(String),
    #[error("augmentation failed: {0}")]
    Augmentation(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => ErrorKind::Numeric,
            Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownAssistant(_) => {
                ErrorKind::Usage
            }
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
