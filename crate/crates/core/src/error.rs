use thiserror::Error;

/// Errors produced by the conditioning library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { residual: f64, iterations: usize },

    #[error("singular matrix (pivot magnitude {pivot:.3e})")]
    SingularMatrix { pivot: f64 },

    #[error("singular sub-Jacobian: {0}")]
    SingularSubJacobian(String),

    #[error("Householder reflector {index} has norm {norm:.3e}")]
    ZeroReflector { index: usize, norm: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("Neumann series diverging in layer {layer} after {terms} terms")]
    SeriesDiverging { layer: usize, terms: usize },

    #[error("invalid indices: {0}")]
    InvalidIndices(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("quadrature grid too coarse: normalization drift {drift:.3e}")]
    GridTooCoarse { drift: f64 },

    #[error("quadrature grid truncates conditional mass: edge mass {edge_mass:.3e}")]
    GridTruncated { edge_mass: f64 },

    #[error("rejection acceptance rate {rate:.3e} below threshold")]
    AcceptanceTooLow { rate: f64 },

    #[error("importance weights degenerate: effective sample size {ess:.2}")]
    DegenerateWeights { ess: f64 },

    #[error("constraint solver failed on {failed} of {total} attempts")]
    TooManySolverFailures { failed: usize, total: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected,
            got,
            context,
        })
    }
}
