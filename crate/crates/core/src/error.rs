use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("position {0:?} lies outside the grid bounding box")]
    OutOfBounds([f64; 3]),
    #[error("cannot resample grid from {from:?} down to {to:?}")]
    Downsample { from: [usize; 3], to: [usize; 3] },
    #[error("invalid grid shape: {0}")]
    InvalidGrid(String),
    #[error("roughness must be positive, got {0}")]
    InvalidRoughness(f64),
    #[error("zero-length normal")]
    DegenerateNormal,
    #[error("half vector undefined for antiparallel directions")]
    AntiparallelDirections,
    #[error("view direction is at or below the horizon (z = {0})")]
    BelowHorizon(f64),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("non-finite gradient in {group}[{index}]")]
    NonFiniteGradient { group: &'static str, index: usize },
    #[error("non-finite parameter in {group}[{index}] after update")]
    NonFiniteParameter { group: &'static str, index: usize },
    #[error("non-finite loss at step {0}")]
    Diverged(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),
    #[error("malformed {kind} file {path}: {reason}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short identifier for the error kind, for scripts parsing CLI output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::OutOfBounds(_) => "out_of_bounds",
            Error::Downsample { .. } => "downsample",
            Error::InvalidGrid(_) => "invalid_grid",
            Error::InvalidRoughness(_) => "invalid_roughness",
            Error::DegenerateNormal => "degenerate_normal",
            Error::AntiparallelDirections => "antiparallel",
            Error::BelowHorizon(_) => "below_horizon",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFiniteGradient { .. } => "nonfinite_gradient",
            Error::NonFiniteParameter { .. } => "nonfinite_parameter",
            Error::Diverged(_) => "diverged",
            Error::Checkpoint(_) | Error::CheckpointVersion(_) => "checkpoint",
            Error::Format { .. } => "format",
            Error::Image { .. } => "image",
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
        }
    }
}
