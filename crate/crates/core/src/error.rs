use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-length bone {parent}->{child}")]
    ZeroLengthBone { parent: usize, child: usize },
    #[error("joint {joint} is behind the camera (depth {depth} mm)")]
    BehindCamera { joint: usize, depth: f64 },
    #[error("skeleton mismatch: {0}")]
    SkeletonMismatch(String),
    #[error("degenerate pose: {0}")]
    DegeneratePose(String),
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("model descriptors differ")]
    DescriptorMismatch,
    #[error("degenerate bone direction (bone {0})")]
    DegenerateDirection(usize),
    #[error("degenerate quaternion")]
    DegenerateQuaternion,
    #[error("zero-norm 2D pose")]
    ZeroNormPose,
    #[error("diffusion step {step} outside 1..={max}")]
    StepOutOfRange { step: usize, max: usize },
    #[error("empty domain")]
    EmptyDomain,
    #[error("empty source set")]
    EmptySource,
    #[error("noise predictor has not been trained")]
    UntrainedPredictor,
    #[error("access violation: {0}")]
    AccessViolation(String),
    #[error("missing labels for domain {0}")]
    MissingLabels(String),
    #[error("invalid synthetic domain spec: {0}")]
    InvalidSpec(String),
    #[error("{path}:{line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },
    #[error("skeleton hash mismatch: file has {found}, expected {expected}")]
    SkeletonHashMismatch { expected: String, found: String },
    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("run directory {0} already exists (use --force to overwrite)")]
    RunExists(PathBuf),
    #[error("io error on {path}: {source}")]
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

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
