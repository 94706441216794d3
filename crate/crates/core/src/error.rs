use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite function value while perturbing parameter {param}, entry {entry}")]
    NonFiniteCheck { param: usize, entry: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("point ({x}, {y}, {z}) lies outside the unit cube")]
    OutsideUnitCube { x: f64, y: f64, z: f64 },

    #[error("kept region holds {kept} points, need {needed}")]
    KeptRegionTooSmall { kept: usize, needed: usize },

    #[error("mesh is empty")]
    EmptyMesh,

    #[error("{0}")]
    Metric(String),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file")]
    Truncated,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checkpoint has no posterior weights; it cannot encode complete inputs")]
    MissingPosterior,

    #[error(transparent)]
    Io(#[from] io::Error),
}
