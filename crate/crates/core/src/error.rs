use std::path::PathBuf;

use crate::volume::GridSpec;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("anisotropic voxel spacing ({0}, {1}, {2}) mm; only isotropic grids are supported")]
    Anisotropic(f64, f64, f64),

    #[error("non-finite value at linear index {0}")]
    NonFinite(usize),

    #[error("grid mismatch: {a} vs {b}")]
    GridMismatch { a: GridSpec, b: GridSpec },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("field kind mismatch: expected {expected}, got {actual}")]
    KindMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("singular Jacobian (det {det:e}) at voxel {voxel:?}")]
    SingularJacobian { voxel: [usize; 3], det: f64 },

    #[error("folding: Jacobian determinant {det:e} <= 0 at voxel {voxel:?}")]
    Folding { voxel: [usize; 3], det: f64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("grid too small: {0}")]
    GridTooSmall(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
}

impl Error {
    /// True for failures of the numerical pipeline (as opposed to bad data or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularJacobian { .. }
                | Error::Folding { .. }
                | Error::NonFiniteLoss(_)
                | Error::DegenerateInput(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
