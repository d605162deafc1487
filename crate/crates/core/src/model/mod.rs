//! State-dependent coefficient plants `ẋ = A(x)x + Bu` with output `y = Cx`.

mod builtin;
mod fem;

pub use builtin::{banks5d_model, banks5d_x0, oscillator_model};
pub use fem::{
    assemble_fem, chaffee_infante_model, chaffee_infante_model_with, chaffee_x0, FemDiscretization,
    CHAFFEE_OBSERVATION_POINTS,
};

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::matkit::{DenseMatrix, StateVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("alpha = {0} is outside [-1, 1]")]
    AlphaOutOfRange(f64),
    #[error("mesh with {n} elements is too coarse (need at least {min})")]
    MeshTooCoarse { n: usize, min: usize },
    #[error("observation point z = {0} lies outside the domain")]
    ObservationOffGrid(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mass matrix is not positive definite")]
    MassNotPositiveDefinite,
}

/// Coefficient map `x ↦ A(x)`.
pub type CoefficientFn = Arc<dyn Fn(&StateVector) -> DenseMatrix + Send + Sync>;

/// An SDC plant. Cloning is cheap; the coefficient map is shared.
#[derive(Clone)]
pub struct SdcModel {
    pub name: String,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    coefficient: CoefficientFn,
    pub b: DenseMatrix,
    pub c: DenseMatrix,
    pub lipschitz_hint: Option<f64>,
    pub mass_matrix: Option<DenseMatrix>,
}

impl fmt::Debug for SdcModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdcModel")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("p", &self.p)
            .field("q", &self.q)
            .field("lipschitz_hint", &self.lipschitz_hint)
            .field("has_mass_matrix", &self.mass_matrix.is_some())
            .finish()
    }
}

impl SdcModel {
    /// `b` is `n×p` (use `n×0` for an autonomous plant) and `c` is `q×n`.
    pub fn new(name: impl Into<String>, n: usize, coefficient: CoefficientFn, b: DenseMatrix, c: DenseMatrix) -> Result<Self, ModelError> {
        if b.nrows() != n {
            return Err(ModelError::ShapeMismatch(format!("B has {} rows, state dimension is {n}", b.nrows())));
        }
        if c.ncols() != n {
            return Err(ModelError::ShapeMismatch(format!("C has {} columns, state dimension is {n}", c.ncols())));
        }
        Ok(SdcModel {
            name: name.into(),
            n,
            p: b.ncols(),
            q: c.nrows(),
            coefficient,
            b,
            c,
            lipschitz_hint: None,
            mass_matrix: None,
        })
    }

    /// Plant with a state-independent coefficient matrix.
    pub fn linear(name: impl Into<String>, a: DenseMatrix, b: DenseMatrix, c: DenseMatrix) -> Result<Self, ModelError> {
        if a.nrows() != a.ncols() {
            return Err(ModelError::ShapeMismatch(format!("A is {}x{}", a.nrows(), a.ncols())));
        }
        let n = a.nrows();
        let mut m = SdcModel::new(name, n, Arc::new(move |_: &StateVector| a.clone()), b, c)?;
        m.lipschitz_hint = Some(0.0);
        Ok(m)
    }

    pub fn with_lipschitz_hint(mut self, l: f64) -> Self {
        self.lipschitz_hint = Some(l);
        self
    }

    pub fn with_mass_matrix(mut self, mass: DenseMatrix) -> Result<Self, ModelError> {
        if mass.nrows() != self.n || mass.ncols() != self.n {
            return Err(ModelError::ShapeMismatch(format!("mass matrix is {}x{}", mass.nrows(), mass.ncols())));
        }
        self.mass_matrix = Some(mass);
        Ok(self)
    }

    pub fn coefficient_at(&self, x: &StateVector) -> DenseMatrix {
        (self.coefficient)(x)
    }

    /// Open-loop vector field `A(x)x`.
    pub fn drift(&self, x: &StateVector) -> StateVector {
        self.coefficient_at(x) * x
    }

    /// `Q = CᵀC`.
    pub fn output_weight(&self) -> DenseMatrix {
        self.c.transpose() * &self.c
    }

    /// Norm used for states: Euclidean, or `√(xᵀMx)` when `mass` is set
    /// and the model carries a mass matrix.
    pub fn state_norm(&self, x: &StateVector, mass: bool) -> f64 {
        match (&self.mass_matrix, mass) {
            (Some(m), true) => x.dot(&(m * x)).max(0.0).sqrt(),
            _ => x.norm(),
        }
    }

    /// Equivalent plant in coordinates `y = Lᵀx` with `M = LLᵀ`, so the
    /// Euclidean norm of `y` is the mass norm of `x`.
    pub fn mass_weighted(&self) -> Result<SdcModel, ModelError> {
        let Some(mass) = &self.mass_matrix else {
            return Ok(self.clone());
        };
        let chol = mass.clone().cholesky().ok_or(ModelError::MassNotPositiveDefinite)?;
        let l = chol.l();
        let lt = l.transpose();
        let lt_inv = lt.clone().try_inverse().ok_or(ModelError::MassNotPositiveDefinite)?;
        let inner = self.coefficient.clone();
        let (lt_c, lt_inv_c) = (lt.clone(), lt_inv.clone());
        let coefficient: CoefficientFn = Arc::new(move |y: &StateVector| {
            let x = &lt_inv_c * y;
            &lt_c * inner(&x) * &lt_inv_c
        });
        let b = &lt * &self.b;
        let c = &self.c * &lt_inv;
        let mut out = SdcModel::new(format!("{}-mass", self.name), self.n, coefficient, b, c)?;
        out.lipschitz_hint = None;
        Ok(out)
    }
}

/// `(A(x) − B·F)·x`. `None` for the gain gives the open-loop field with the
/// same arithmetic path as a zero gain.
pub fn closed_loop_derivative(model: &SdcModel, gain: Option<&DenseMatrix>, x: &StateVector) -> Result<StateVector, ModelError> {
    if x.len() != model.n {
        return Err(ModelError::ShapeMismatch(format!("state has length {}, expected {}", x.len(), model.n)));
    }
    let mut dx = model.drift(x);
    if let Some(f) = gain {
        if f.nrows() != model.p || f.ncols() != model.n {
            return Err(ModelError::ShapeMismatch(format!(
                "gain is {}x{}, expected {}x{}",
                f.nrows(),
                f.ncols(),
                model.p,
                model.n
            )));
        }
        let u = f * x;
        // a zero input leaves the open-loop field untouched, signed zeros included
        if u.iter().any(|v| *v != 0.0) {
            dx -= &model.b * u;
        }
    }
    Ok(dx)
}

/// Closed-loop vector field `(t, x) ↦ (A(x) − B·F(x))·x`.
pub fn closed_loop_rhs<'a, G>(model: &'a SdcModel, gain: G) -> impl Fn(f64, &StateVector) -> Result<StateVector, ModelError> + 'a
where
    G: Fn(&StateVector) -> Option<DenseMatrix> + 'a,
{
    move |_t, x| {
        let f = gain(x);
        closed_loop_derivative(model, f.as_ref(), x)
    }
}
