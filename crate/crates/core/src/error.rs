use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::FormatError;
use crate::linalg::LinalgError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    #[error("rank guard violated: {0}")]
    RankGuard(RankGuardReport),

    #[error("negative curvature value {value} in layer `{layer}`")]
    NegativeCurvature { layer: String, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("malformed metadata sidecar {}: {reason}", path.display())]
    Metadata { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn misaligned(msg: impl Into<String>) -> Self {
        Error::Misaligned(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True when the failure comes from a numerical solve that ran out of jitter escalations.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Linalg(LinalgError::FactorizationFailed { .. } | LinalgError::NonFinite)
                | Error::Divergence { .. }
        )
    }
}

/// One matrix layer whose dimensions cannot host `k * T` atoms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankViolation {
    pub layer: String,
    pub rows: usize,
    pub cols: usize,
    pub required: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RankGuardReport {
    pub violations: Vec<RankViolation>,
}

impl fmt::Display for RankGuardReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(
                f,
                "layer `{}` is {}x{} but needs k*T = {} <= min(dims)",
                v.layer, v.rows, v.cols, v.required
            )?;
        }
        Ok(())
    }
}
