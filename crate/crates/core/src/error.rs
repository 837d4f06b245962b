use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the quantization toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid channel {layer}:{channel}")]
    InvalidChannel { layer: usize, channel: usize },

    #[error("unsupported bit-width {0}; expected one of 0, 2, 4, 8, 16")]
    InvalidBitWidth(u32),

    #[error("quantization parameters are not applicable to {0}-bit channels")]
    ParamsNotApplicable(u32),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("allocation does not match model: {0}")]
    AllocationMismatch(String),

    #[error("missing sensitivity entry for {layer}:{channel} at {bits} bits")]
    MissingEntry { layer: usize, channel: usize, bits: u32 },

    #[error("budget {budget} cannot be met: {reason}")]
    BudgetInfeasible { budget: f64, reason: String },

    #[error("instance too large for exhaustive search: {0} channels (max {1})")]
    InstanceTooLarge(usize, usize),

    #[error("least-squares fit failed: {0}")]
    FitFailed(String),

    #[error("parse error in {file} at line {line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
