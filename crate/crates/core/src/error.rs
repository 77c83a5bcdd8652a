use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("{0}: empty tensor")]
    Empty(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("batch norm with batch statistics needs more than one sample per batch")]
    SingleSampleBatchNorm,
    #[error("quantization range must be positive, got {0}")]
    Range(f64),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("unsupported layer kind: {0}")]
    UnsupportedLayer(String),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("idx: {0}")]
    Idx(String),
    #[error("{path}: {msg}")]
    Config { path: String, msg: String },
    #[error("loss became non-finite ({loss}) at iteration {iteration}")]
    Divergence { iteration: u64, loss: f32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
