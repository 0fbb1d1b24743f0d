use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite: pivot {pivot} is {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("non-finite loss at optimizer step {step}")]
    NonFiniteLoss { step: usize },

    #[error("backward called without a matching forward cache")]
    MissingCache,

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Checkpoint(_) => 2,
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::NotPositiveDefinite { .. } => 3,
            Error::Shape { .. } | Error::MissingCache => 1,
        }
    }
}
