use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid curvature {0}: curvature must be strictly negative")]
    InvalidCurvature(f64),

    #[error("tangent vector is not spacelike (<v,v>_L = {0})")]
    InvalidTangent(f64),

    #[error("point is not on the hyperboloid (residual {residual:e})")]
    NotOnManifold { residual: f64 },

    #[error("argument outside the numerical domain: {0}")]
    NumericalDomain(String),

    #[error("vector is not future timelike (<v,v>_L = {0})")]
    NotTimelike(f64),

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("frame has no valid depth pixels")]
    EmptyFrame,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("moving-average window must be at least 1 (got {0})")]
    InvalidWindow(usize),

    #[error("non-finite value produced by `{op}`")]
    NonFiniteGradient { op: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("labels contain a single class")]
    DegenerateLabels,

    #[error("no data found at {0}")]
    DataNotFound(PathBuf),

    #[error("checkpoint incompatible with configuration: {0}")]
    IncompatibleCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
