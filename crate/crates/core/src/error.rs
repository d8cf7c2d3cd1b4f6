use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LblmError>;

#[derive(Debug, Error)]
pub enum LblmError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input too short: length {len} < required {required}")]
    InputTooShort { len: usize, required: usize },

    #[error("subject id {subject} outside [0, {count})")]
    SubjectRange { subject: usize, count: usize },

    #[error("label {label} outside [0, {classes})")]
    Label { label: usize, classes: usize },

    #[error("step {step} exceeds schedule length {total}")]
    OutOfRange { step: usize, total: usize },

    #[error("non-finite loss: {0}")]
    DegenerateFunction(String),

    #[error("non-finite gradient in `{0}`, update refused")]
    PoisonedUpdate(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("labeled trial at {start} extends to {end} beyond recording length {len}")]
    Truncation { start: usize, end: usize, len: usize },

    #[error("stage ordering: {0}")]
    StageOrder(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LblmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LblmError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        LblmError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        LblmError::Shape(msg.into())
    }

    /// Stable snake_case name of the variant, for machine-readable output.
    pub fn kind(&self) -> &'static str {
        match self {
            LblmError::Shape(_) => "shape",
            LblmError::Config(_) => "config",
            LblmError::InputTooShort { .. } => "input_too_short",
            LblmError::SubjectRange { .. } => "subject_range",
            LblmError::Label { .. } => "label",
            LblmError::OutOfRange { .. } => "out_of_range",
            LblmError::DegenerateFunction(_) => "degenerate_function",
            LblmError::PoisonedUpdate(_) => "poisoned_update",
            LblmError::DegenerateVariance(_) => "degenerate_variance",
            LblmError::Truncation { .. } => "truncation",
            LblmError::StageOrder(_) => "stage_order",
            LblmError::Format { .. } => "format",
            LblmError::Io { .. } => "io",
            LblmError::Json(_) => "json",
        }
    }
}
