use std::sync::Arc;

use super::{ModelError, SdcModel};
use crate::matkit::{DenseMatrix, StateVector};

/// Autonomous oscillator with `A(x) = [[-1, -(1+ξ₁²)], [1+ξ₁², α]]`.
///
/// Both eigenvalues have real part `(α-1)/2` at every state.
pub fn oscillator_model(alpha: f64) -> Result<SdcModel, ModelError> {
    if !(-1.0..=1.0).contains(&alpha) {
        return Err(ModelError::AlphaOutOfRange(alpha));
    }
    let coefficient = Arc::new(move |x: &StateVector| {
        let c = 1.0 + x[0] * x[0];
        DenseMatrix::from_row_slice(2, 2, &[-1.0, -c, c, alpha])
    });
    SdcModel::new(format!("oscillator(alpha={alpha})"), 2, coefficient, DenseMatrix::zeros(2, 0), DenseMatrix::zeros(0, 2))
}

/// Five-state example with two inputs entering states 3 and 5 and outputs
/// observing states 1 and 4.
pub fn banks5d_model() -> SdcModel {
    let coefficient = Arc::new(|x: &StateVector| {
        let x1 = x[0];
        let x4sq = x[3] * x[3];
        let mut a = DenseMatrix::zeros(5, 5);
        a[(0, 1)] = 1.0;
        a[(1, 2)] = 1.0;
        a[(2, 3)] = x4sq;
        a[(3, 0)] = -x1;
        a[(3, 3)] = x4sq;
        a
    });
    let mut b = DenseMatrix::zeros(5, 2);
    b[(2, 0)] = 1.0;
    b[(4, 1)] = 1.0;
    let mut c = DenseMatrix::zeros(2, 5);
    c[(0, 0)] = 1.0;
    c[(1, 3)] = 1.0;
    SdcModel::new("banks5d", 5, coefficient, b, c).expect("static shapes")
}

/// Initial state of the five-state experiment.
pub fn banks5d_x0() -> StateVector {
    StateVector::from_vec(vec![-1.3, -1.4, -1.1, -2.0, 0.3])
}
