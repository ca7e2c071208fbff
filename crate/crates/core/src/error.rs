use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {dims:?}: {reason}")]
    InvalidShape { dims: Vec<usize>, reason: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("coordinate ({0}, {1}) out of range for {2}x{3} map")]
    OutOfRange(usize, usize, usize, usize),

    #[error("unsupported checkpoint version {0}")]
    Version(u64),

    #[error("shape mismatch for parameter `{name}`: expected {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("unsupported image format in {path}: {reason}")]
    Unsupported { path: PathBuf, reason: String },

    #[error("non-binary mask byte {value} in {path}")]
    NonBinaryMask { path: PathBuf, value: u8 },

    #[error("orphan file {0}: missing image/mask partner")]
    Orphan(PathBuf),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("loss became non-finite at step {step}")]
    NanLoss { step: usize },

    #[error("prediction {0} outside [0, 1]")]
    PredictionRange(f64),

    #[error("mask value {0} is not binary")]
    NonBinaryValue(f64),

    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),

    #[error("unknown variant `{given}`; valid names: {valid}")]
    UnknownVariant { given: String, valid: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
