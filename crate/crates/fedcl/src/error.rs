//! Error type shared across the crate.

use crate::inversion::InversionReport;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("parameter layout mismatch: {0}")]
    Layout(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("non-finite value at layer {layer} during {stage}")]
    NonFinite { layer: usize, stage: &'static str },

    #[error("non-finite gradient passed to optimizer")]
    NonFiniteGradient,

    #[error("data generation diverged at round {round}")]
    GenerationDiverged {
        round: usize,
        report: Box<InversionReport>,
    },

    #[error("idx file {path}: bad magic bytes")]
    IdxMagic { path: String },

    #[error("idx file {path}: truncated ({detail})")]
    IdxTruncated { path: String, detail: String },

    #[error("idx pair: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("bad serialized model: {0}")]
    BadModelFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(String),

    #[error("json error: {0}")]
    Json(String),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

impl Error {
    /// Process exit code category: 2 = config, 3 = data, 4 = numeric, 1 = other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArg(_) => 2,
            Error::IdxMagic { .. }
            | Error::IdxTruncated { .. }
            | Error::IdxCountMismatch { .. }
            | Error::BadModelFile(_) => 3,
            Error::NonFinite { .. }
            | Error::NonFiniteGradient
            | Error::GenerationDiverged { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
