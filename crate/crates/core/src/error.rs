use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed NIfTI header field `magic`: found {found:?}")]
    MalformedMagic { found: [u8; 4] },

    #[error("malformed NIfTI header field `sizeof_hdr`: expected 348, found {found}")]
    MalformedHeaderSize { found: i32 },

    #[error("unsupported NIfTI header field `datatype`: code {code}")]
    UnsupportedDatatype { code: i16 },

    #[error("NIfTI header field `{field}` is inconsistent: {detail}")]
    DimensionMismatch { field: &'static str, detail: String },

    #[error("expected a vector NIfTI (dim[0]=5, dim[5]=3), found {detail}")]
    NotVectorField { detail: String },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("point ({:.3}, {:.3}, {:.3}) mm lacks a full 4x4x4 control-point neighborhood", .point[0], .point[1], .point[2])]
    OutsideSupport { point: [f64; 3] },

    #[error("AC, PC and IH are collinear (orthogonal IH component norm {norm:.3e} mm)")]
    CollinearLandmarks { norm: f64 },

    #[error("rigid fit needs at least 3 shared landmarks, found {found}")]
    InsufficientCorrespondences { found: usize },

    #[error("degenerate landmark configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("duplicate landmark name `{0}`")]
    DuplicateLandmark(String),

    #[error("unknown landmark name `{0}`")]
    UnknownLandmark(String),

    #[error("missing landmark `{0}`")]
    MissingLandmark(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("mask bounding box plus margin exceeds target dims by {overflow:?} voxels")]
    BboxExceedsTarget { overflow: [usize; 3] },

    #[error("spatial dims {dims:?} are not divisible by {divisor}")]
    DimsNotDivisible { dims: [usize; 3], divisor: usize },

    #[error("parameters changed since the forward pass (recorded version {recorded}, current {current})")]
    StaleActivations { recorded: u64, current: u64 },

    #[error("non-finite loss term `{term}` at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },

    #[error("cross-validation fold {fold} has no training cases")]
    FoldWithoutTraining { fold: usize },

    #[error("checkpoint does not match the network architecture: {0}")]
    CheckpointShape(String),

    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed cohort: {0}")]
    Cohort(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }

    /// Stable machine-readable code, used for `error[CODE]:` prefixes and C status mapping.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IO",
            Error::MalformedMagic { .. } => "NIFTI_MAGIC",
            Error::MalformedHeaderSize { .. } => "NIFTI_HEADER",
            Error::UnsupportedDatatype { .. } => "NIFTI_DTYPE",
            Error::DimensionMismatch { .. } => "NIFTI_DIM",
            Error::NotVectorField { .. } => "NOT_VECTOR",
            Error::InvalidVolume(_) => "INVALID_VOLUME",
            Error::GeometryMismatch(_) => "GEOMETRY",
            Error::OutsideSupport { .. } => "OUTSIDE_SUPPORT",
            Error::CollinearLandmarks { .. } => "COLLINEAR",
            Error::InsufficientCorrespondences { .. } => "CORRESPONDENCES",
            Error::DegenerateConfiguration(_) => "DEGENERATE",
            Error::DuplicateLandmark(_) => "DUPLICATE_LANDMARK",
            Error::MissingLandmark(_) => "MISSING_LANDMARK",
            Error::UnknownLandmark(_) => "UNKNOWN_LANDMARK",
            Error::EmptyMask => "EMPTY_MASK",
            Error::BboxExceedsTarget { .. } => "BBOX",
            Error::DimsNotDivisible { .. } => "DIMS",
            Error::StaleActivations { .. } => "STALE",
            Error::NonFiniteLoss { .. } => "NONFINITE",
            Error::FoldWithoutTraining { .. } => "FOLD",
            Error::CheckpointShape(_) => "CKPT_SHAPE",
            Error::CheckpointFormat(_) => "CKPT_FORMAT",
            Error::Config(_) => "CONFIG",
            Error::Json { .. } => "JSON",
            Error::Cohort(_) => "COHORT",
            Error::GradCheck(_) => "GRADCHECK",
        }
    }

    /// True for errors caused by bad user input that is rejected before any work starts.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
