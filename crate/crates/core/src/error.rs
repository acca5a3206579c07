use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix has non-finite entries")]
    InvalidMatrix,
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:e}, tolerance {tol:e})")]
    NotPsd { min_eig: f64, tol: f64 },
    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: &'static str, found: usize },
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("degenerate simplex {0}")]
    DegenerateSimplex(usize),
    #[error("numerical failure: {0}")]
    Numerical(&'static str),
    #[error("paraboloid projection did not converge (residual {residual:e})")]
    Projection { residual: f64 },
    #[error("negative or non-finite mass {0}")]
    InvalidMass(f64),
    #[error("epsilon {eps} outside (0, {max})")]
    InvalidEpsilon { eps: f64, max: f64 },
    #[error("invalid problem: {0}")]
    InvalidProblem(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
