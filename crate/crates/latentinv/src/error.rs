use thiserror::Error;

/// Errors shared across the crate.
///
/// Numerical failure paths carry enough context to locate the offending
/// computation (node ids, residuals, shapes); they are not meant to be
/// matched on exhaustively by callers.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value in {context}{}", node.map(|n| format!(" (tape node {n})")).unwrap_or_default())]
    NonFinite {
        context: &'static str,
        node: Option<usize>,
    },

    #[error("linear solver did not converge: relative residual {residual:.3e} after {iters} iterations")]
    SolverDiverged { residual: f64, iters: usize },

    #[error("Cholesky factorization failed at pivot {pivot} (value {value:.3e})")]
    CholeskyFailed { pivot: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("optimization failed: {0}")]
    Optim(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
