use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("batch norm needs at least 2 samples in train mode, got {0}")]
    BatchTooSmall(usize),
    #[error("unknown encoder `{0}`")]
    UnknownEncoder(String),
    #[error("latent dimension mismatch: encoder produces {encoder}, decoder expects {decoder}")]
    LatentMismatch { encoder: usize, decoder: usize },
    #[error("image carries no intensity")]
    EmptyImage,
    #[error("simulation failed: {0}")]
    Generation(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("split `{0}` has no shots")]
    EmptySplit(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::BatchTooSmall(_) => "batch-too-small",
            Error::UnknownEncoder(_) => "unknown-encoder",
            Error::LatentMismatch { .. } => "latent-mismatch",
            Error::EmptyImage => "empty-image",
            Error::Generation(_) => "generation",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::EmptySplit(_) => "empty-split",
            Error::Refused(_) => "refused",
            Error::Version { .. } => "version",
            Error::Format(_) => "format",
            Error::Integrity(_) => "integrity",
            Error::ConfigMismatch(_) => "config-mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
