use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("unsupported manifest version {0} (expected 1)")]
    UnsupportedVersion(u32),

    #[error("{entry}: expected {expected} values, found {actual}")]
    DimensionMismatch {
        entry: String,
        expected: usize,
        actual: usize,
    },

    #[error("{entry}: non-finite logit at example {example}, class {class}")]
    NonFinite {
        entry: String,
        example: usize,
        class: usize,
    },

    #[error("label {label} at example {example} is outside [0, {num_classes})")]
    LabelOutOfRange {
        example: usize,
        label: u32,
        num_classes: usize,
    },

    #[error("{entry}: cost must be positive and finite, got {cost}")]
    InvalidCost { entry: String, cost: f64 },

    #[error("duplicate model id `{0}`")]
    DuplicateModelId(String),

    #[error("duplicate replicate {replicate_index} of model type `{model_type}`")]
    DuplicateReplicate {
        model_type: String,
        replicate_index: u32,
    },

    #[error("model pool is empty")]
    EmptyPool,

    #[error("unknown model id `{0}`")]
    UnknownModel(String),

    #[error("model `{0}` appears more than once in the cascade")]
    RepeatedModel(String),

    #[error("expected {expected} thresholds, got {actual}")]
    ThresholdCount { expected: usize, actual: usize },

    #[error("{0}")]
    InvalidArgument(String),

    /// The requested target cannot be met; carries the closest point found.
    #[error("infeasible target: {message} (best achievable: accuracy {best_accuracy:.6}, avg cost {best_cost:.6})")]
    Infeasible {
        message: String,
        best_accuracy: f64,
        best_cost: f64,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(self, Error::Infeasible { .. })
    }
}
