use std::sync::Arc;

use super::{ModelError, SdcModel};
use crate::matkit::{DenseMatrix, StateVector};

const DOMAIN_LENGTH: f64 = 2.0;
const REACTION: f64 = 5.0;

/// Default observation locations on `(0, 2)`.
pub const CHAFFEE_OBSERVATION_POINTS: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];

/// Linear hat-function discretization of `(0, 2)` with the Dirichlet node at
/// `z = 0` eliminated.
#[derive(Debug, Clone)]
pub struct FemDiscretization {
    pub elements: usize,
    pub h: f64,
    pub mass: DenseMatrix,
    pub stiffness: DenseMatrix,
    /// Global node indices of the unknowns (`1..=N`).
    pub free_nodes: Vec<usize>,
}

impl FemDiscretization {
    pub fn node_coordinate(&self, global: usize) -> f64 {
        global as f64 * self.h
    }

    /// Coordinates of the free nodes, in unknown order.
    pub fn free_coordinates(&self) -> Vec<f64> {
        self.free_nodes.iter().map(|&g| self.node_coordinate(g)).collect()
    }

    /// Row vector evaluating the piecewise linear interpolant at `z`.
    pub fn interpolation_row(&self, z: f64) -> Result<Vec<f64>, ModelError> {
        if !(0.0..=DOMAIN_LENGTH).contains(&z) {
            return Err(ModelError::ObservationOffGrid(z));
        }
        let mut row = vec![0.0; self.elements];
        let mut pos = z / self.h;
        if (pos - pos.round()).abs() < 1e-9 {
            pos = pos.round();
        }
        let left = (pos.floor() as usize).min(self.elements - 1);
        let w = pos - left as f64;
        // unknown k holds global node k + 1; node 0 is the Dirichlet node
        if left >= 1 {
            row[left - 1] += 1.0 - w;
        }
        row[left] += w;
        Ok(row)
    }
}

/// Assembles mass and stiffness matrices for `N` elements on `(0, 2)`.
pub fn assemble_fem(elements: usize) -> Result<FemDiscretization, ModelError> {
    if elements < 2 {
        return Err(ModelError::MeshTooCoarse { n: elements, min: 2 });
    }
    let n = elements;
    let h = DOMAIN_LENGTH / n as f64;
    let mut mass = DenseMatrix::zeros(n + 1, n + 1);
    let mut stiff = DenseMatrix::zeros(n + 1, n + 1);
    for e in 0..n {
        let (i, j) = (e, e + 1);
        mass[(i, i)] += h / 3.0;
        mass[(j, j)] += h / 3.0;
        mass[(i, j)] += h / 6.0;
        mass[(j, i)] += h / 6.0;
        stiff[(i, i)] += 1.0 / h;
        stiff[(j, j)] += 1.0 / h;
        stiff[(i, j)] -= 1.0 / h;
        stiff[(j, i)] -= 1.0 / h;
    }
    Ok(FemDiscretization {
        elements: n,
        h,
        mass: mass.view((1, 1), (n, n)).into_owned(),
        stiffness: stiff.view((1, 1), (n, n)).into_owned(),
        free_nodes: (1..=n).collect(),
    })
}

/// Nodal values of `0.2·sin(0.5πz)` on the free nodes.
pub fn chaffee_x0(elements: usize) -> StateVector {
    let h = DOMAIN_LENGTH / elements as f64;
    StateVector::from_iterator(elements, (1..=elements).map(|i| 0.2 * (0.5 * std::f64::consts::PI * i as f64 * h).sin()))
}

/// Chaffee–Infante equation `ξ_t = ξ_zz + 5(1-ξ²)ξ` on `(0, 2)` with
/// `ξ(0) = 0` and boundary control `ξ_z(2) = u`, observed at the default
/// five locations.
pub fn chaffee_infante_model(elements: usize) -> Result<SdcModel, ModelError> {
    chaffee_infante_model_with(elements, &CHAFFEE_OBSERVATION_POINTS)
}

/// As [`chaffee_infante_model`] with custom observation points.
pub fn chaffee_infante_model_with(elements: usize, observe: &[f64]) -> Result<SdcModel, ModelError> {
    if elements < 4 {
        return Err(ModelError::MeshTooCoarse { n: elements, min: 4 });
    }
    let fem = assemble_fem(elements)?;
    let n = elements;
    let lu = fem.mass.clone().lu();
    let diffusion = -lu.solve(&fem.stiffness).ok_or(ModelError::MassNotPositiveDefinite)?;
    let mut e_last = DenseMatrix::zeros(n, 1);
    e_last[(n - 1, 0)] = 1.0;
    let b = lu.solve(&e_last).ok_or(ModelError::MassNotPositiveDefinite)?;
    let mut c = DenseMatrix::zeros(observe.len(), n);
    for (k, &z) in observe.iter().enumerate() {
        for (j, w) in fem.interpolation_row(z)?.into_iter().enumerate() {
            c[(k, j)] = w;
        }
    }
    let coefficient = Arc::new(move |x: &StateVector| {
        let mut a = diffusion.clone();
        for i in 0..n {
            a[(i, i)] += REACTION * (1.0 - x[i] * x[i]);
        }
        a
    });
    SdcModel::new(format!("chaffee(N={n})"), n, coefficient, b, c)?.with_mass_matrix(fem.mass)
}
