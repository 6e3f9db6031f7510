use thiserror::Error;

/// Diagnostics carried by a failed conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgFailure {
    /// Best iterate reached before the solver gave up.
    pub best: Vec<f64>,
    /// Weighted residual norm of the best iterate.
    pub residual: f64,
    /// Number of iterations performed.
    pub iterations: usize,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric at ({row},{col})")]
    NotSymmetric { row: usize, col: usize },

    #[error("matrix dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("symmetric eigensolver did not converge after {iterations} QL iterations")]
    EigenNonConvergence { iterations: usize },

    #[error("matrix is not positive definite: Cholesky pivot {pivot} failed")]
    NotPositiveDefinite { pivot: usize },

    #[error("conjugate gradient hit the iteration cap ({}) with residual {:.3e}", .0.iterations, .0.residual)]
    CgMaxIter(Box<CgFailure>),

    #[error("conjugate gradient broke down at iteration {iteration} (non-positive curvature {curvature:.3e})")]
    CgBreakdown { iteration: usize, curvature: f64 },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("scalar function undefined at eigenvalue {eigenvalue}")]
    MatrixFunctionDomain { eigenvalue: f64 },

    #[error("negative time {t} not supported by the forward semigroup")]
    BackwardSemigroup { t: f64 },

    #[error("grid with {nodes} interior nodes per side cannot resolve {modes} modes per side")]
    Aliasing { nodes: usize, modes: usize },

    #[error("degenerate triangle {id} in mesh assembly")]
    DegenerateTriangle { id: usize },

    #[error("observation point {index} lies on the boundary or outside the domain")]
    ObservationOutside { index: usize },

    #[error("eigenvalue parameter must be positive, got {value}")]
    NonPositiveEigenvalue { value: f64 },

    #[error("cubic eigenvalue equation has a complex conjugate root pair (discriminant {discriminant:.3e})")]
    ComplexRoots { discriminant: f64 },

    #[error("requested {requested} eigenvalues but the system has dimension {dim}")]
    InvalidCount { requested: usize, dim: usize },

    #[error("operation unsupported: {0}")]
    UnsupportedOperation(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("data file was produced on the inversion grid (n = {n}); fine/coarse separation violated")]
    InverseCrime { n: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
