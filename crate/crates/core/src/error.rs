//! Error type shared by the library and the command-line front end.

use thiserror::Error;

/// Everything that can go wrong in this crate.
///
/// The variants group into three families, which the CLI maps onto exit codes:
/// configuration and input problems, convergence failures, and violated runtime
/// invariants (mass drift, blow-up, malformed cache files).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination.
    #[error("config: {0}")]
    Config(String),

    /// Mismatched array dimensions between operands.
    #[error("dimension mismatch: {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A backward characteristic never leaves the domain (zero velocity in the
    /// interior, or a velocity tangent to a slab of infinite extent).
    #[error("infinite backward exit time at x={x:?}, v={v:?}")]
    InfiniteExitTime { x: [f64; 3], v: [f64; 3] },

    /// A backward time cycle produced two consecutive zero exit times.
    #[error("degenerate backward cycle at boundary point {x:?}")]
    DegenerateCycle { x: [f64; 3] },

    /// An iteration failed to reach its tolerance within its budget.
    #[error("no convergence: {what} after {iterations} iterations (residual {residual:.3e}, tol {tol:.3e})")]
    Convergence {
        what: String,
        iterations: usize,
        residual: f64,
        tol: f64,
    },

    /// A marching solution exceeded the blow-up bound.
    #[error("solution blow-up: {what}: norm {norm:.3e} exceeds {bound:.3e}")]
    Blowup { what: String, norm: f64, bound: f64 },

    /// A state value stopped being finite during time marching.
    #[error("non-finite value at t={t:.6}, space cell {x_cell}, velocity node {v_node}")]
    NonFinite { t: f64, x_cell: usize, v_node: usize },

    /// The conserved mass moment drifted beyond its tolerance.
    #[error("mass-moment drift {drift:.3e} exceeds tolerance {tol:.3e} ({context})")]
    MassDrift {
        context: String,
        drift: f64,
        tol: f64,
    },

    /// A kernel cache file failed validation.
    #[error("kernel cache: {0}")]
    CacheFormat(String),

    /// Decay fitting got a series it cannot work with.
    #[error("decay fit: {0}")]
    FitInvalid(String),

    /// Filesystem failure.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Helper for one-line config errors.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
