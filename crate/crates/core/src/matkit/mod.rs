//! Dense real linear-algebra kernels: Schur factorization and reordering,
//! the matrix exponential, and the Riccati and Sylvester solvers.
//!
//! Matrices are plain `nalgebra::DMatrix<f64>` values (column-major storage);
//! [`from_row_major`] is the checked constructor for row-major input.

mod care;
mod expm;
mod schur;
mod sylvester;

pub use care::{solve_care, CareSolution};
pub use expm::{
    eigenvector_condition, matrix_exponential, transient_bound, transient_bound_with,
    TransientBound, TransientMethod, DEFAULT_TRANSIENT_SAMPLES,
};
pub use schur::{order_schur, real_schur, SchurForm};
pub use sylvester::{
    separation, solve_sylvester, solve_sylvester_schur, SEPARATION_MAX_DIM,
};

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

/// Real dense matrix with shape metadata.
pub type DenseMatrix = DMatrix<f64>;

/// Real state vector.
pub type StateVector = DVector<f64>;

/// Complex eigenvalue.
pub type Eigenvalue = Complex<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatError {
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("QR iteration did not converge within {iterations} iterations")]
    ConvergenceFailure { iterations: usize },
    #[error("eigenvalue selection splits a complex conjugate pair at block {block}")]
    ConjugatePairSplit { block: usize },
    #[error("Schur block swap rejected at position {position} (ill-conditioned)")]
    SwapRejected { position: usize },
    #[error("spectral abscissa {abscissa} exceeds -omega = {}", -omega)]
    UnstableMatrix { abscissa: f64, omega: f64 },
    #[error("pair is not stabilizable: stable invariant subspace has dimension {stable}, need {required}")]
    NotStabilizable { stable: usize, required: usize },
    #[error("projection block of the stable invariant subspace is singular")]
    SingularProjection,
    #[error("R is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("spectra overlap: Sylvester pivot {pivot:e} below threshold {threshold:e}")]
    SpectraOverlap { pivot: f64, threshold: f64 },
    #[error("Kronecker dimension {dim} exceeds limit {limit}")]
    TooLarge { dim: usize, limit: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Builds a matrix from row-major entries, rejecting wrong lengths and
/// non-finite values.
pub fn from_row_major(rows: usize, cols: usize, entries: &[f64]) -> Result<DenseMatrix, MatError> {
    if entries.len() != rows * cols {
        return Err(MatError::ShapeMismatch(format!(
            "{} entries for a {rows}x{cols} matrix",
            entries.len()
        )));
    }
    if entries.iter().any(|v| !v.is_finite()) {
        return Err(MatError::NonFinite);
    }
    Ok(DMatrix::from_row_slice(rows, cols, entries))
}

pub(crate) fn ensure_square(a: &DenseMatrix) -> Result<usize, MatError> {
    if a.nrows() != a.ncols() {
        return Err(MatError::NonSquare { rows: a.nrows(), cols: a.ncols() });
    }
    Ok(a.nrows())
}

pub(crate) fn ensure_finite(a: &DenseMatrix) -> Result<(), MatError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MatError::NonFinite)
    }
}

/// Spectral norm (largest singular value).
pub fn operator_norm(a: &DenseMatrix) -> f64 {
    match (a.nrows(), a.ncols()) {
        (0, _) | (_, 0) => 0.0,
        (1, _) | (_, 1) => a.norm(),
        (2, 2) => {
            // closed form for the common 2x2 case
            let f2 = a.norm_squared();
            let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
            let disc = (f2 * f2 - 4.0 * det * det).max(0.0).sqrt();
            ((f2 + disc) * 0.5).sqrt()
        }
        _ => a.clone().svd(false, false).singular_values.max(),
    }
}

/// Frobenius norm.
pub fn frobenius_norm(a: &DenseMatrix) -> f64 {
    a.norm()
}

/// Eigenvalues via the real Schur form, in diagonal-block order.
pub fn eigenvalues(a: &DenseMatrix) -> Result<Vec<Eigenvalue>, MatError> {
    Ok(real_schur(a)?.eigenvalues)
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(a: &DenseMatrix) -> Result<f64, MatError> {
    let n = ensure_square(a)?;
    if n == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(eigenvalues(a)?.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max))
}

/// Solves `a * x = b` by LU with partial pivoting; `None` if singular.
pub(crate) fn lu_solve(a: &DenseMatrix, b: &DenseMatrix) -> Option<DenseMatrix> {
    a.clone().lu().solve(b)
}
