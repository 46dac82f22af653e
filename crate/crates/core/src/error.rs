use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("vector is not on the probability simplex (sum = {sum}, min = {min})")]
    NotOnSimplex { sum: f64, min: f64 },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("parameter manifests differ")]
    ManifestMismatch,
    #[error("domain weights are not on the simplex (sum = {sum})")]
    InvalidWeights { sum: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("corruption fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("class vote needs at least one surviving teacher")]
    NoSurvivors,
    #[error("need at least {required} source domains, found {found}")]
    TooFewSources { required: usize, found: usize },
    #[error("model has no BatchNorm layer")]
    NoBatchNorm,
    #[error("batch of {0} rows is too small, at least 2 required")]
    BatchTooSmall(usize),
    #[error("unknown weighting strategy `{0}`")]
    UnknownStrategy(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed model upload: {0}")]
    Wire(String),
    #[error("sync {sync} (epoch {epoch}) failed during {stage}: {source}")]
    Round {
        sync: usize,
        epoch: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
