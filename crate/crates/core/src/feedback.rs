//! SDRE feedback and the p-update controller, which propagates a base
//! Riccati solution through Sylvester-equation updates and re-solves the
//! Riccati equation once the update grows past a threshold.

use thiserror::Error;

use crate::matkit::{
    frobenius_norm, matrix_exponential, operator_norm, real_schur, solve_care, solve_sylvester_schur,
    spectral_abscissa, transient_bound, DenseMatrix, MatError, SchurForm, StateVector, DEFAULT_TRANSIENT_SAMPLES,
};
use crate::model::SdcModel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeedbackError {
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error("epsilon = {0} must lie in (0, 1) for the p-update controller")]
    InvalidEpsilon(f64),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("both the exact and the perturbed Sylvester solve failed: {0}")]
    SylvesterFailure(MatError),
    #[error("update norm {norm} is not below 1")]
    SingularUpdate { norm: f64 },
    #[error("state has length {got}, expected {expected}")]
    StateLength { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    Sdre,
    PUpdate,
}

/// Norm used for the `‖E‖ < ε` test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateNorm {
    #[default]
    Spectral,
    Frobenius,
}

/// When the p-update controller may reset its base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResetPolicy {
    /// Stage evaluations use the current base; the reset test runs once per
    /// accepted integrator step.
    #[default]
    AcceptedStep,
    /// Every right-hand-side evaluation may reset.
    Evaluation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerOptions {
    pub norm: UpdateNorm,
    pub reset_policy: ResetPolicy,
    /// Compute the transient constant of `Z` at every (re)initialization so
    /// that reports carry `K̃`.
    pub track_transient: bool,
    pub transient_samples: usize,
}

impl Default for ControllerOptions {
    fn default() -> Self {
        ControllerOptions {
            norm: UpdateNorm::Spectral,
            reset_policy: ResetPolicy::AcceptedStep,
            track_transient: false,
            transient_samples: DEFAULT_TRANSIENT_SAMPLES,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GainReport {
    pub f: DenseMatrix,
    /// `(1+‖E‖)/(1−‖E‖)·K` in p-update mode; NaN when not tracked.
    pub k_tilde: f64,
    pub omega: f64,
    pub used_perturbed_solve: bool,
    pub norm_e: f64,
    /// The gain came from a fresh Riccati solve after a reset.
    pub reset: bool,
}

/// Candidate update at a state, computed without touching the controller.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub e: DenseMatrix,
    pub a_delta: DenseMatrix,
    pub norm_e: f64,
    pub perturbed: bool,
    /// `F = R⁻¹BᵀP(I+E)⁻¹`; `None` when `‖E‖ ≥ 1` or `I+E` is singular.
    pub f: Option<DenseMatrix>,
    /// `‖E‖ ≥ ε`: committing this proposal resets the base.
    pub needs_reset: bool,
}

#[derive(Debug, Clone)]
pub struct ControllerState {
    pub mode: ControlMode,
    pub options: ControllerOptions,
    pub base_state: StateVector,
    pub p: DenseMatrix,
    pub z: DenseMatrix,
    pub e: DenseMatrix,
    pub epsilon: f64,
    pub q: DenseMatrix,
    pub r: DenseMatrix,
    pub r_inv: DenseMatrix,
    pub r_delta: DenseMatrix,
    pub switch_count: usize,
    pub perturbed_fallback_used: bool,
    /// Transient constant of `Z` (NaN when not tracked or `Z` is not Hurwitz).
    pub k_base: f64,
    /// `|abscissa(Z)|·(1 − 1e-3)`, or 0 when `Z` is not Hurwitz.
    pub omega_base: f64,
    /// The base Riccati solution made `Z` Hurwitz.
    pub stabilizing: bool,
    a_base: DenseMatrix,
    g: DenseMatrix,
    gain_base: DenseMatrix,
    z_schur: SchurForm,
    neg_z_schur: SchurForm,
}

fn check_weights(model: &SdcModel, q: &DenseMatrix, r: &DenseMatrix) -> Result<(), FeedbackError> {
    let (n, p) = (model.n, model.p);
    if q.nrows() != n || q.ncols() != n {
        return Err(FeedbackError::InvalidWeights(format!("Q is {}x{}, expected {n}x{n}", q.nrows(), q.ncols())));
    }
    if r.nrows() != p || r.ncols() != p {
        return Err(FeedbackError::InvalidWeights(format!("R is {}x{}, expected {p}x{p}", r.nrows(), r.ncols())));
    }
    if (q - q.transpose()).amax() > 1e-12 * q.amax().max(1.0) {
        return Err(FeedbackError::InvalidWeights("Q is not symmetric".into()));
    }
    if n > 0 && q.clone().symmetric_eigen().eigenvalues.min() < -1e-12 * q.amax().max(1.0) {
        return Err(FeedbackError::InvalidWeights("Q is not positive semidefinite".into()));
    }
    Ok(())
}

fn check_state(model: &SdcModel, x: &StateVector) -> Result<(), FeedbackError> {
    if x.len() != model.n {
        return Err(FeedbackError::StateLength { got: x.len(), expected: model.n });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MatError::NonFinite.into());
    }
    Ok(())
}

fn invert_spd(r: &DenseMatrix) -> Result<DenseMatrix, FeedbackError> {
    if (r - r.transpose()).amax() > 1e-12 * r.amax().max(1.0) {
        return Err(FeedbackError::InvalidWeights("R is not symmetric".into()));
    }
    let chol = r.clone().cholesky().ok_or(FeedbackError::Mat(MatError::NotPositiveDefinite))?;
    Ok(chol.inverse())
}

/// Fresh SDRE gain `F = R⁻¹BᵀP(x)`.
pub fn sdre_gain(model: &SdcModel, x: &StateVector, q: &DenseMatrix, r: &DenseMatrix) -> Result<GainReport, FeedbackError> {
    check_state(model, x)?;
    check_weights(model, q, r)?;
    let r_inv = invert_spd(r)?;
    let a = model.coefficient_at(x);
    let care = solve_care(&a, &model.b, q, r)?;
    let f = &r_inv * model.b.transpose() * &care.p;
    let omega = -spectral_abscissa(&care.closed_loop)?;
    Ok(GainReport { f, k_tilde: f64::NAN, omega, used_perturbed_solve: false, norm_e: 0.0, reset: false })
}

impl ControllerState {
    /// Solves the Riccati equation at `x0` and sets `E = 0`.
    pub fn init(
        model: &SdcModel,
        x0: &StateVector,
        q: &DenseMatrix,
        r: &DenseMatrix,
        epsilon: f64,
        mode: ControlMode,
        options: ControllerOptions,
    ) -> Result<Self, FeedbackError> {
        check_state(model, x0)?;
        check_weights(model, q, r)?;
        if mode == ControlMode::PUpdate && !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(FeedbackError::InvalidEpsilon(epsilon));
        }
        let r_inv = invert_spd(r)?;
        let g = &model.b * &r_inv * model.b.transpose();
        let mut state = ControllerState {
            mode,
            options,
            base_state: x0.clone(),
            p: DenseMatrix::zeros(0, 0),
            z: DenseMatrix::zeros(0, 0),
            e: DenseMatrix::zeros(model.n, model.n),
            epsilon: if mode == ControlMode::PUpdate { epsilon } else { 0.0 },
            q: q.clone(),
            r: r.clone(),
            r_inv,
            r_delta: DenseMatrix::zeros(model.p, model.p),
            switch_count: 0,
            perturbed_fallback_used: false,
            k_base: f64::NAN,
            omega_base: 0.0,
            stabilizing: false,
            a_base: DenseMatrix::zeros(0, 0),
            g,
            gain_base: DenseMatrix::zeros(0, 0),
            z_schur: real_schur(&DenseMatrix::zeros(0, 0))?,
            neg_z_schur: real_schur(&DenseMatrix::zeros(0, 0))?,
        };
        state.rebase(model, x0)?;
        Ok(state)
    }

    fn rebase(&mut self, model: &SdcModel, x: &StateVector) -> Result<(), FeedbackError> {
        let a = model.coefficient_at(x);
        let care = solve_care(&a, &model.b, &self.q, &self.r)?;
        let z = care.closed_loop;
        let z_schur = real_schur(&z)?;
        let abscissa = z_schur.eigenvalues.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
        let neg_z_schur = SchurForm {
            q: z_schur.q.clone(),
            t: -&z_schur.t,
            eigenvalues: z_schur.eigenvalues.iter().map(|l| -l).collect(),
        };
        self.stabilizing = abscissa < 0.0;
        self.omega_base = if self.stabilizing { -abscissa * (1.0 - 1e-3) } else { 0.0 };
        self.k_base = if self.options.track_transient && self.stabilizing {
            transient_bound(&z, self.omega_base, 50.0 / self.omega_base, self.options.transient_samples)?
        } else {
            f64::NAN
        };
        self.gain_base = (&self.r_inv + &self.r_delta) * model.b.transpose() * &care.p;
        self.base_state = x.clone();
        self.p = care.p;
        self.z = z;
        self.z_schur = z_schur;
        self.neg_z_schur = neg_z_schur;
        self.a_base = a;
        self.e = DenseMatrix::zeros(model.n, model.n);
        Ok(())
    }

    fn measure(&self, e: &DenseMatrix) -> f64 {
        match self.options.norm {
            UpdateNorm::Spectral => operator_norm(e),
            UpdateNorm::Frobenius => frobenius_norm(e),
        }
    }

    pub fn k_tilde(&self, norm_e: f64) -> f64 {
        (1.0 + norm_e) / (1.0 - norm_e) * self.k_base
    }

    /// Gain of the current base, `R⁻¹BᵀP`.
    pub fn base_gain(&self) -> &DenseMatrix {
        &self.gain_base
    }

    /// Solves `A(x)E − EZ = −A_Δ + BR_ΔBᵀP` (falling back to the perturbed
    /// system `(A(x) − BR⁻¹BᵀP)E + EZ = …`) and forms the updated gain.
    pub fn propose(&self, model: &SdcModel, x: &StateVector) -> Result<Proposal, FeedbackError> {
        check_state(model, x)?;
        let a = model.coefficient_at(x);
        let a_delta = &a - &self.a_base;
        let mut rhs = -&a_delta;
        if self.r_delta.amax() != 0.0 {
            rhs += &model.b * &self.r_delta * model.b.transpose() * &self.p;
        }
        let (e, perturbed) = match real_schur(&a).and_then(|s| solve_sylvester_schur(&s, &self.z_schur, &rhs)) {
            Ok(e) => (e, false),
            Err(MatError::SpectraOverlap { .. }) | Err(MatError::SwapRejected { .. }) => {
                let a_pert = &a - &self.g * &self.p;
                let e = real_schur(&a_pert)
                    .and_then(|s| solve_sylvester_schur(&s, &self.neg_z_schur, &rhs))
                    .map_err(FeedbackError::SylvesterFailure)?;
                (e, true)
            }
            Err(err) => return Err(err.into()),
        };
        let norm_e = self.measure(&e);
        let f = if norm_e < 1.0 {
            let n = model.n;
            let ipe = DenseMatrix::identity(n, n) + &e;
            // F (I+E) = F_base  ⇔  (I+E)ᵀ Fᵀ = F_baseᵀ
            ipe.transpose().lu().solve(&self.gain_base.transpose()).map(|ft| ft.transpose())
        } else {
            None
        };
        let needs_reset = !(norm_e < self.epsilon) || f.is_none();
        Ok(Proposal { e, a_delta, norm_e, perturbed, f, needs_reset })
    }

    /// Gain at `x`. In p-update mode this resets the base when the update
    /// is too large; in SDRE mode it is a fresh Riccati solve.
    pub fn update_gain(&mut self, model: &SdcModel, x: &StateVector) -> Result<GainReport, FeedbackError> {
        if self.mode == ControlMode::Sdre {
            return sdre_gain(model, x, &self.q, &self.r);
        }
        let prop = self.propose(model, x)?;
        self.commit(model, x, prop)
    }

    /// Applies a proposal: accepts it, or resets at `x` when it asks for one.
    pub fn commit(&mut self, model: &SdcModel, x: &StateVector, prop: Proposal) -> Result<GainReport, FeedbackError> {
        match prop.f {
            Some(f) if !prop.needs_reset => {
                self.e = prop.e;
                if prop.perturbed {
                    self.perturbed_fallback_used = true;
                }
                Ok(GainReport {
                    f,
                    k_tilde: self.k_tilde(prop.norm_e),
                    omega: self.omega_base,
                    used_perturbed_solve: prop.perturbed,
                    norm_e: prop.norm_e,
                    reset: false,
                })
            }
            _ => {
                self.reset(model, x)?;
                Ok(GainReport {
                    f: self.gain_base.clone(),
                    k_tilde: self.k_base,
                    omega: self.omega_base,
                    used_perturbed_solve: false,
                    norm_e: 0.0,
                    reset: true,
                })
            }
        }
    }

    /// Re-solves the Riccati equation at `x` and counts one switch.
    pub fn reset(&mut self, model: &SdcModel, x: &StateVector) -> Result<(), FeedbackError> {
        self.rebase(model, x)?;
        self.switch_count += 1;
        Ok(())
    }

    /// `Q_Δ = (−QE − A_ΔᵀP)(I+E)⁻¹`, the cost perturbation implied by an update.
    pub fn qdelta_of(&self, a_delta: &DenseMatrix, e: &DenseMatrix) -> Result<DenseMatrix, FeedbackError> {
        let norm = operator_norm(e);
        if norm >= 1.0 {
            return Err(FeedbackError::SingularUpdate { norm });
        }
        let n = e.nrows();
        let lhs = -(&self.q * e) - a_delta.transpose() * &self.p;
        let ipe = DenseMatrix::identity(n, n) + e;
        let sol = ipe.transpose().lu().solve(&lhs.transpose()).ok_or(FeedbackError::SingularUpdate { norm })?;
        Ok(sol.transpose())
    }
}

/// Checks `‖e^{Aτ}‖₂ ≤ K e^{−ωτ}` at every grid point with relative slack 1e-6.
pub fn verify_class_membership(acl: &DenseMatrix, k: f64, omega: f64, taus: &[f64]) -> bool {
    taus.iter().all(|&tau| match matrix_exponential(acl, tau) {
        Ok(e) => operator_norm(&e) <= k * (-omega * tau).exp() * (1.0 + 1e-6),
        Err(_) => false,
    })
}
