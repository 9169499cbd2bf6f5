use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("codebook is empty: the partial input has no non-empty patch windows")]
    EmptyCodebook,

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    #[error("optimization produced a non-finite loss (slot {slot}, iteration {iteration})")]
    Optimization { slot: usize, iteration: usize },

    #[error("generation failed: {0}")]
    Generation(String),
}

impl Error {
    /// Short stable name of the variant, used in reports.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::EmptyCodebook => "empty_codebook",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::Optimization { .. } => "optimization",
            Error::Generation(_) => "generation",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: msg.into(),
    }
}
