use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("keyword extraction failed after {attempts} attempts; last response: {last_response:?}")]
    ExtractionFailed { attempts: usize, last_response: String },

    #[error("placeholder {0:?} not found in prompt")]
    MissingPlaceholder(String),

    #[error("placeholder {placeholder:?} appears {count} times in prompt")]
    AmbiguousPlaceholder { placeholder: String, count: usize },

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("training diverged in stage {stage} at step {step}: non-finite loss")]
    Divergence { stage: u8, step: usize },

    #[error("validation error in field `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("data error in {path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("vlm transport error: {0}")]
    Transport(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Short machine-readable label of the innermost error.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Range(_) => "range",
            Error::Parse(_) => "parse",
            Error::Schema(_) => "schema",
            Error::ExtractionFailed { .. } => "extraction-failed",
            Error::MissingPlaceholder(_) => "missing-placeholder",
            Error::AmbiguousPlaceholder { .. } => "ambiguous-placeholder",
            Error::Conflict(_) => "conflict",
            Error::NotFound(_) => "not-found",
            Error::Precondition(_) => "precondition",
            Error::Divergence { .. } => "divergence",
            Error::Validation { .. } => "validation",
            Error::Data { .. } => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::Transport(_) => "transport",
            Error::Stage { .. } => unreachable!("root() looks through stage labels"),
            Error::Io(_) => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }

    /// Innermost error, looking through stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
