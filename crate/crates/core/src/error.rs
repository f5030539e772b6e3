use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("kappa must be in (0,1], got {0}")]
    InvalidKappa(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("partition failed after {attempts} attempts: {reason}; try a larger dataset or a larger alpha")]
    PartitionExhausted { attempts: usize, reason: String },

    #[error("inconsistent channel mask: {0}")]
    InconsistentMask(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors that stem from the configuration rather than from a run.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::InvalidKappa(_) | Error::InvalidSpec(_)
        )
    }
}
