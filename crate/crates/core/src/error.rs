use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("difference at node ({i}, {j}) crosses the boundary of the admissible region")]
    OutOfDomain { i: i64, j: i64 },

    #[error("density must be positive, got m = {0}")]
    NonPositiveDensity(f64),

    #[error("bisection for {what} did not converge in {iterations} iterations (bracket [{lo}, {hi}])")]
    Bisection {
        what: &'static str,
        iterations: usize,
        lo: f64,
        hi: f64,
    },

    #[error("pointwise solve failed at node (i={i}, j={j}, n={n}): {source}")]
    Node {
        i: usize,
        j: usize,
        n: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("Krylov solver did not converge: {iterations} iterations, residual {residual:.3e} (target {target:.3e})")]
    KrylovNonConvergence {
        iterations: usize,
        residual: f64,
        target: f64,
    },

    #[error("Krylov solver broke down twice (iteration {iteration})")]
    KrylovBreakdown { iteration: usize },

    #[error("ADMM iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
