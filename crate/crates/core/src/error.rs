use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes disagree.
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },
    /// Projector rank outside `[2, m]`.
    InvalidRank { m: usize, r: usize },
    /// A scalar parameter is out of its admissible range.
    InvalidParameter { name: &'static str, reason: String },
    /// An iterative inner solve stopped before reaching its tolerance.
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },
    /// The recursion produced a non-finite or exploding state.
    Divergence { iteration: usize, norm: f64 },
    /// The requested mode is not available for this problem.
    Unsupported(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, expected, found } => {
                write!(f, "{op}: shape mismatch (expected {expected}, found {found})")
            }
            Error::InvalidRank { m, r } => {
                write!(f, "invalid projector rank r={r} for m={m} (need 2 <= r <= m)")
            }
            Error::InvalidParameter { name, reason } => write!(f, "invalid {name}: {reason}"),
            Error::NonConvergence {
                solver,
                iterations,
                residual,
            } => write!(
                f,
                "{solver} did not converge after {iterations} iterations (residual {residual:e})"
            ),
            Error::Divergence { iteration, norm } => {
                write!(f, "diverged at iteration {iteration} (state norm {norm:e})")
            }
            Error::Unsupported(what) => write!(f, "unsupported: {what}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
