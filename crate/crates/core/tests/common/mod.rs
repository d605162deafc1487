//! Property checks shared by the invariant suite and the acceptance run.
//! Each check returns `Err` with a description of the first violation.

#![allow(dead_code)]

use std::cell::Cell;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Complex, DMatrix};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdc_stab::bench::{self, records, ExperimentConfig};
use sdc_stab::certify::{
    certify_ensemble, estimate_mt, omega_star, scaled_ring_grid, Certificate, EnsembleSpec,
};
use sdc_stab::feedback::{verify_class_membership, ControlMode, ControllerOptions, ControllerState};
use sdc_stab::matkit::{
    eigenvalues, matrix_exponential, operator_norm, separation, solve_care, solve_sylvester, spectral_abscissa,
    transient_bound, DenseMatrix, MatError, StateVector,
};
use sdc_stab::model::{
    assemble_fem, banks5d_model, banks5d_x0, chaffee_infante_model, chaffee_x0, closed_loop_rhs, oscillator_model, SdcModel,
};
use sdc_stab::odeint::{integrate, integrate_closed_loop, integrate_open_loop, IntegratorConfig, Termination, Trajectory};

pub type Check = Result<(), String>;

pub fn runner(cases: u32, seed: u8) -> TestRunner {
    let cfg = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(cfg, TestRng::from_seed(RngAlgorithm::ChaCha, &[seed; 32]))
}

fn run<S: Strategy>(cases: u32, seed: u8, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Check
where
    S::Value: std::fmt::Debug,
{
    runner(cases, seed).run(&strategy, test).map_err(|e| e.to_string())
}

pub fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    random_matrix(n, n, rng).qr().q()
}

// ---------------------------------------------------------------- matkit

/// Smallest `σ_min([A − λI, B])` over the eigenvalues with `Re λ ≥ 0`; the
/// distance of the pair from losing stabilizability at that mode.
pub fn pbh_margin(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let n = a.nrows();
    let mut margin = f64::INFINITY;
    for l in eigenvalues(a).unwrap().into_iter().filter(|l| l.re >= 0.0) {
        let m = DMatrix::<Complex<f64>>::from_fn(n, n + b.ncols(), |i, j| {
            if j < n {
                Complex::new(a[(i, j)], 0.0) - if i == j { l } else { Complex::new(0.0, 0.0) }
            } else {
                Complex::new(b[(i, j - n)], 0.0)
            }
        });
        margin = margin.min(m.svd(false, false).singular_values.min());
    }
    margin
}

/// Random `(A, B, Q, R)` with `Q`, `R` positive definite. The spectrum of
/// `A` fills a disc of radius about 1.15 centred at −0.5. Draws whose
/// unstable modes sit within 1e-3 of uncontrollability are redrawn: there
/// `‖P‖` reaches 1e13 and no double-precision solver returns a stabilizing
/// gain.
pub fn random_lq_problem(n: usize, p: usize, seed: u64) -> (DenseMatrix, DenseMatrix, DenseMatrix, DenseMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = loop {
        let a = random_matrix(n, n, &mut rng) * (2.0 / (n as f64).sqrt()) - DenseMatrix::identity(n, n) * 0.5;
        let b = random_matrix(n, p, &mut rng);
        if pbh_margin(&a, &b) >= 1e-3 {
            break (a, b);
        }
    };
    let m = random_matrix(n, n, &mut rng);
    let q = m.transpose() * m + DenseMatrix::identity(n, n) * 0.1;
    let l = random_matrix(p, p, &mut rng);
    let r = &l * l.transpose() + DenseMatrix::identity(p, p) * 0.5;
    (a, b, q, r)
}

/// Residual `‖AᵀP + PA − PBR⁻¹BᵀP + Q‖_F` and the scale
/// `max(1, ‖Q‖_F, ‖P‖_F²·‖BR⁻¹Bᵀ‖_F)` it is measured against.
pub fn riccati_residual(a: &DenseMatrix, b: &DenseMatrix, q: &DenseMatrix, r: &DenseMatrix, p: &DenseMatrix) -> (f64, f64) {
    let g = b * r.clone().try_inverse().expect("R invertible") * b.transpose();
    let atp = a.transpose() * p;
    let res = &atp + atp.transpose() - p * &g * p + q;
    (res.norm(), 1f64.max(q.norm()).max(p.norm().powi(2) * g.norm()))
}

pub fn check_care_instance(n: usize, p: usize, seed: u64) -> Check {
    let (a, b, q, r) = random_lq_problem(n, p, seed);
    let sol = solve_care(&a, &b, &q, &r).map_err(|e| format!("n={n} p={p} seed={seed}: {e}"))?;
    let (res, scale) = riccati_residual(&a, &b, &q, &r, &sol.p);
    if res > 1e-9 * scale {
        return Err(format!("n={n} p={p} seed={seed}: residual {res:e} vs scale {scale:e}"));
    }
    let gain = r.clone().try_inverse().unwrap() * b.transpose() * &sol.p;
    let abscissa = spectral_abscissa(&(&a - &b * gain)).map_err(|e| e.to_string())?;
    if !(abscissa < 0.0) {
        return Err(format!("n={n} p={p} seed={seed}: closed-loop abscissa {abscissa}"));
    }
    Ok(())
}

pub fn prop_care_residual_and_stability() -> Check {
    run(200, 1, (1usize..=30, 1usize..=3, any::<u64>()), |(n, p, seed)| {
        check_care_instance(n, p, seed).map_err(TestCaseError::fail)
    })
}

/// Direct solve of `(I ⊗ A1 − A2ᵀ ⊗ I) vec(X) = vec(C)`.
pub fn kronecker_solve(a1: &DenseMatrix, a2: &DenseMatrix, c: &DenseMatrix) -> Option<DenseMatrix> {
    let (n, m) = (a1.nrows(), a2.nrows());
    let k = DMatrix::<f64>::identity(m, m).kronecker(a1) - a2.transpose().kronecker(&DMatrix::<f64>::identity(n, n));
    let v = k.lu().solve(&DMatrix::from_column_slice(n * m, 1, c.as_slice()))?;
    Some(DenseMatrix::from_column_slice(n, m, v.as_slice()))
}

pub fn check_sylvester_instance(n: usize, m: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a1 = random_matrix(n, n, &mut rng);
    let a2 = random_matrix(m, m, &mut rng);
    let c = random_matrix(n, m, &mut rng);
    let oracle = kronecker_solve(&a1, &a2, &c).ok_or("oracle singular")?;
    let x = solve_sylvester(&a1, &a2, &c).map_err(|e| format!("n={n} m={m} seed={seed}: {e}"))?;
    let d = (&x - &oracle).norm();
    if d > 1e-8 * oracle.norm().max(1.0) {
        return Err(format!("n={n} m={m} seed={seed}: distance {d:e}, |X| = {:e}", oracle.norm()));
    }
    Ok(())
}

pub fn sylvester_dims() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..=10, 1usize..=10, any::<u64>()).prop_filter("nm <= 100", |(n, m, _)| n * m <= 100)
}

pub fn prop_sylvester_matches_kronecker() -> Check {
    run(100, 2, sylvester_dims(), |(n, m, seed)| check_sylvester_instance(n, m, seed).map_err(TestCaseError::fail))
}

pub fn prop_expm_semigroup() -> Check {
    run(100, 3, (1usize..=6, any::<u64>(), 0.0f64..2.0, 0.0f64..2.0), |(n, seed, s, t)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(n, n, &mut rng);
        let whole = matrix_exponential(&a, s + t).unwrap();
        let split = matrix_exponential(&a, s).unwrap() * matrix_exponential(&a, t).unwrap();
        let d = (&whole - split).norm();
        prop_assert!(d <= 1e-9 * whole.norm(), "difference {d:e} vs {:e}", whole.norm());
        Ok(())
    })
}

pub fn prop_transient_bound_holds_on_fresh_samples() -> Check {
    run(100, 4, (1usize..=6, any::<u64>(), 0.0f64..1.0), |(n, seed, frac)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = random_matrix(n, n, &mut rng) * 2.0;
        let shift = spectral_abscissa(&raw).unwrap() + 0.2;
        let a = raw - DenseMatrix::identity(n, n) * shift;
        let omega = -spectral_abscissa(&a).unwrap() * frac;
        let tau_max = 10.0;
        let k = transient_bound(&a, omega, tau_max, 2000).unwrap();
        for _ in 0..1000 {
            let tau = rng.random_range(0.0..tau_max);
            let lhs = operator_norm(&matrix_exponential(&a, tau).unwrap());
            let rhs = k * (-omega * tau).exp() * (1.0 + 1e-6);
            prop_assert!(lhs <= rhs, "tau = {tau}: {lhs} > {rhs}");
        }
        Ok(())
    })
}

/// `Q T Qᵀ` with a quasi-triangular `T` whose first diagonal block is
/// `shared`, the remaining eigenvalues drawn from `[lo, hi]`.
fn with_block(n: usize, shared: &DenseMatrix, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let k = shared.nrows();
    let mut t = DenseMatrix::zeros(n, n);
    t.view_mut((0, 0), (k, k)).copy_from(shared);
    for i in k..n {
        t[(i, i)] = rng.random_range(lo..hi);
    }
    for i in 0..n {
        for j in i + 1..n {
            if !(i < k && j < k) {
                t[(i, j)] = rng.random_range(-1.0..1.0);
            }
        }
    }
    let q = orthogonal(n, rng);
    &q * t * q.transpose()
}

pub fn prop_separation_zero_iff_overlap() -> Check {
    run(100, 5, (2usize..=6, 2usize..=6, any::<u64>(), any::<bool>(), any::<bool>()), |(n, m, seed, complex, shared)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lam = rng.random_range(-2.0..2.0);
        let block_a = if complex {
            let w = rng.random_range(0.5..2.0);
            DenseMatrix::from_row_slice(2, 2, &[lam, w, -w, lam])
        } else {
            DenseMatrix::from_row_slice(1, 1, &[lam])
        };
        let block_b = if shared { block_a.clone() } else { &block_a + DenseMatrix::identity(block_a.nrows(), block_a.nrows()) * 20.0 };
        // the remaining spectra are kept apart: a1 in [5, 8], a2 in [-8, -5]
        let a1 = with_block(n, &block_a, 5.0, 8.0, &mut rng);
        let a2 = with_block(m, &block_b, -8.0, -5.0, &mut rng);
        let c = random_matrix(n, m, &mut rng);
        let solved = solve_sylvester(&a1, &a2, &c);
        let sep = separation(&a1, &a2).unwrap();
        let overlap = matches!(solved, Err(MatError::SpectraOverlap { .. }));
        prop_assert_eq!(overlap, shared, "solve result {:?}", solved.err());
        prop_assert_eq!(sep == 0.0, overlap, "sep = {}", sep);
        Ok(())
    })
}

// ---------------------------------------------------------------- model

fn state_in_ball(n: usize, radius: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-radius..radius, n)
}

pub fn prop_builtin_coefficients_finite_and_lipschitz() -> Check {
    const R: f64 = 3.0;
    let chaffee = chaffee_infante_model(8).unwrap();
    let cases: Vec<(SdcModel, f64)> = vec![
        // analytic Lipschitz bounds on the ball of radius R
        (oscillator_model(0.4).unwrap(), 2.0 * R),
        (banks5d_model(), (8.0 * R * R + 1.0f64).sqrt()),
        (chaffee, 10.0 * R),
    ];
    for (k, (model, bound)) in cases.into_iter().enumerate() {
        let n = model.n;
        run(100, 10 + k as u8, (state_in_ball(n, R), state_in_ball(n, R)), |(x, y)| {
            let (x, y) = (StateVector::from_vec(x), StateVector::from_vec(y));
            let (ax, ay) = (model.coefficient_at(&x), model.coefficient_at(&y));
            prop_assert!(ax.iter().all(|v| v.is_finite()));
            let d = (&x - &y).norm();
            if d > 0.0 {
                let quotient = operator_norm(&(ax - ay)) / d;
                prop_assert!(quotient <= bound * (1.0 + 1e-12), "{}: quotient {quotient} above {bound}", model.name);
            }
            Ok(())
        })?;
    }
    Ok(())
}

pub fn prop_fem_forms_definite() -> Check {
    run(100, 13, (2usize..=60, any::<u64>()), |(n, seed)| {
        let fem = assemble_fem(n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = StateVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        prop_assume!(x.norm() > 0.0);
        prop_assert!(x.dot(&(&fem.stiffness * &x)) >= 0.0);
        prop_assert!(x.dot(&(&fem.mass * &x)) > 0.0);
        Ok(())
    })
}

fn numeric_rank(m: &DenseMatrix) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let tol = sv.max() * 1e-10 * m.nrows().max(m.ncols()) as f64;
    sv.iter().filter(|s| **s > tol).count()
}

pub fn controllability_matrix(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let n = a.nrows();
    let p = b.ncols();
    let mut k = DenseMatrix::zeros(n, n * p);
    let mut blk = b.clone();
    for i in 0..n {
        k.view_mut((0, i * p), (n, p)).copy_from(&blk);
        blk = a * blk;
    }
    k
}

/// Rank of the controllability and observability matrices at one state.
pub fn banks5d_ranks(x: &StateVector) -> (usize, usize) {
    let m = banks5d_model();
    let a = m.coefficient_at(x);
    let ctrb = controllability_matrix(&a, &m.b);
    let obsv = controllability_matrix(&a.transpose(), &m.c.transpose());
    (numeric_rank(&ctrb), numeric_rank(&obsv))
}

pub fn prop_banks5d_controllable_and_observable() -> Check {
    run(50, 14, state_in_ball(5, 3.0), |x| {
        let (c, o) = banks5d_ranks(&StateVector::from_vec(x));
        prop_assert_eq!(c, 5, "controllability rank");
        prop_assert_eq!(o, 5, "observability rank");
        Ok(())
    })
}

pub fn prop_zero_gain_is_open_loop_bitwise() -> Check {
    let models = [oscillator_model(-0.3).unwrap(), banks5d_model(), chaffee_infante_model(6).unwrap()];
    for (k, model) in models.iter().enumerate() {
        let zero = DenseMatrix::zeros(model.p, model.n);
        let rhs = closed_loop_rhs(model, |_| Some(zero.clone()));
        run(100, 15 + k as u8, state_in_ball(model.n, 5.0), |x| {
            let x = StateVector::from_vec(x);
            let closed = rhs(0.0, &x).unwrap();
            let open = model.coefficient_at(&x) * &x;
            prop_assert!(closed.iter().zip(open.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
            Ok(())
        })?;
    }
    Ok(())
}

// ---------------------------------------------------------------- feedback

/// `A(x) = A₀ + ξ₁A₁ + ξ₂²A₂` with random data and two inputs.
pub fn random_sdc_model(n: usize, seed: u64) -> SdcModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a0 = random_matrix(n, n, &mut rng);
    let a1 = random_matrix(n, n, &mut rng) * 0.5;
    let a2 = random_matrix(n, n, &mut rng) * 0.5;
    let b = random_matrix(n, 2, &mut rng);
    let c = DenseMatrix::identity(n, n);
    let coefficient = Arc::new(move |x: &StateVector| &a0 + &a1 * x[0] + &a2 * (x[1] * x[1]));
    SdcModel::new("random", n, coefficient, b, c).unwrap()
}

fn chaffee_controller(n: usize, eps: f64) -> (SdcModel, StateVector, ControllerState) {
    let m = chaffee_infante_model(n).unwrap();
    let x0 = chaffee_x0(n);
    let ctrl = ControllerState::init(&m, &x0, &m.output_weight(), &(DenseMatrix::identity(1, 1) * 0.1), eps, ControlMode::PUpdate, ControllerOptions::default())
        .unwrap();
    (m, x0, ctrl)
}

/// Residual of the equation the proposal solved: `A(x)E − EZ + A_Δ − BR_ΔBᵀP`,
/// or for the perturbed fallback `(A(x) − BR⁻¹BᵀP)E + EZ + A_Δ − BR_ΔBᵀP`.
fn update_residual(model: &SdcModel, ctrl: &ControllerState, x: &StateVector, e: &DenseMatrix, a_delta: &DenseMatrix, perturbed: bool) -> f64 {
    let a = model.coefficient_at(x);
    let corr = &model.b * &ctrl.r_delta * model.b.transpose() * &ctrl.p;
    if perturbed {
        let g = &model.b * &ctrl.r_inv * model.b.transpose();
        ((&a - g * &ctrl.p) * e + e * &ctrl.z + a_delta - corr).norm()
    } else {
        (&a * e - e * &ctrl.z + a_delta - corr).norm()
    }
}

pub fn prop_update_sylvester_residual() -> Check {
    let (chaffee, cx0, cctrl) = chaffee_controller(8, 0.9);
    run(100, 20, (any::<u64>(), 0.0f64..0.3, any::<bool>()), |(seed, delta, use_random)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, x0, ctrl) = if use_random {
            let m = random_sdc_model(6, seed);
            let x0 = StateVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let ctrl = ControllerState::init(&m, &x0, &DenseMatrix::identity(6, 6), &DenseMatrix::identity(2, 2), 0.9, ControlMode::PUpdate, ControllerOptions::default())
                .map_err(|e| TestCaseError::reject(e.to_string()))?;
            (m, x0, ctrl)
        } else {
            (chaffee.clone(), cx0.clone(), cctrl.clone())
        };
        let dir = StateVector::from_fn(model.n, |_, _| rng.random_range(-1.0..1.0));
        let x = &x0 + dir * delta;
        let prop = ctrl.propose(&model, &x).map_err(|e| TestCaseError::fail(e.to_string()))?;
        if prop.f.is_some() && !prop.needs_reset {
            let res = update_residual(&model, &ctrl, &x, &prop.e, &prop.a_delta, prop.perturbed);
            prop_assert!(res <= 1e-8 * prop.a_delta.norm().max(1.0), "residual {res:e}");
        }
        Ok(())
    })
}

pub fn prop_reset_correctness() -> Check {
    run(100, 21, (any::<u64>(), 0.05f64..0.5), |(seed, eps)| {
        let (model, x0, mut ctrl) = chaffee_controller(8, eps);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = x0.clone();
        for _ in 0..20 {
            x = &x * rng.random_range(0.8..1.2) + StateVector::from_fn(8, |_, _| rng.random_range(-0.05..0.05));
            let prop = ctrl.propose(&model, &x).unwrap();
            let before = ctrl.switch_count;
            let wants = prop.needs_reset;
            let norm = prop.norm_e;
            let rep = ctrl.commit(&model, &x, prop).unwrap();
            if wants {
                prop_assert!(rep.reset);
                prop_assert_eq!(ctrl.e.amax(), 0.0);
                prop_assert_eq!(ctrl.switch_count, before + 1);
            } else {
                prop_assert!(!rep.reset);
                prop_assert!(norm < eps);
                prop_assert_eq!(ctrl.switch_count, before);
            }
        }
        Ok(())
    })
}

/// Runs p-update with closed-loop recording and checks the class bound at
/// every accepted update on 200 points of `[0, 20/ω]`. Returns the number
/// of checked updates.
pub fn class_membership_along_run(model: &SdcModel, x0: &StateVector, q: &DenseMatrix, r: &DenseMatrix, eps: f64, cfg: &IntegratorConfig) -> Result<usize, String> {
    let options = ControllerOptions { track_transient: true, ..ControllerOptions::default() };
    let ctrl = ControllerState::init(model, x0, q, r, eps, ControlMode::PUpdate, options).map_err(|e| format!("initial Riccati solve: {e}"))?;
    if !ctrl.stabilizing {
        return Err("the initial Riccati closed loop is not Hurwitz, so no decay rate omega > 0 exists".into());
    }
    let run = integrate_closed_loop(model, ctrl, x0, cfg, true).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for s in &run.steps {
        let acl = s.closed_loop.as_ref().ok_or("closed loop not recorded")?;
        if !(s.omega > 0.0) || !s.k_tilde.is_finite() {
            return Err(format!("t = {}: omega = {}, K~ = {}", s.t, s.omega, s.k_tilde));
        }
        let taus: Vec<f64> = (0..200).map(|i| 20.0 / s.omega * i as f64 / 199.0).collect();
        if !verify_class_membership(acl, s.k_tilde, s.omega, &taus) {
            return Err(format!("t = {}: bound violated with |E| = {}, K~ = {}", s.t, s.norm_e, s.k_tilde));
        }
        checked += 1;
    }
    Ok(checked)
}

pub fn banks5d_weights() -> (DenseMatrix, DenseMatrix) {
    let m = banks5d_model();
    (m.output_weight(), DenseMatrix::identity(2, 2) * 1e-3)
}

pub fn prop_class_membership_banks5d() -> Check {
    let (q, r) = banks5d_weights();
    class_membership_along_run(&banks5d_model(), &banks5d_x0(), &q, &r, 0.9, &IntegratorConfig::new(1e-6, 1e-6, 3.0)).map(|_| ())
}

pub fn check_class_membership_chaffee() -> Check {
    let m = chaffee_infante_model(20).unwrap();
    let mut cfg = IntegratorConfig::new(1e-6, 1e-6, 3.0);
    cfg.tol_scaling = 10.0;
    let n = class_membership_along_run(&m, &chaffee_x0(20), &m.output_weight(), &(DenseMatrix::identity(1, 1) * 0.1), 0.9, &cfg)?;
    if n == 0 {
        return Err("no updates checked".into());
    }
    Ok(())
}

pub fn prop_gain_continuity() -> Check {
    let (model, x0, ctrl) = chaffee_controller(8, 0.9);
    run(100, 22, (any::<u64>(), 0.0f64..0.2), |(seed, spread)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = &x0 + StateVector::from_fn(8, |_, _| rng.random_range(-spread..spread));
        let v = StateVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0)).normalize();
        let base = ctrl.propose(&model, &x).unwrap();
        prop_assume!(!base.needs_reset);
        let f0 = base.f.unwrap();
        let mut ratios = Vec::new();
        let mut last = f64::INFINITY;
        for k in 2..=6 {
            let d = 10f64.powi(-k);
            let p = ctrl.propose(&model, &(&x + &v * d)).unwrap();
            prop_assume!(!p.needs_reset);
            let diff = (p.f.unwrap() - &f0).norm();
            ratios.push(diff / d);
            last = diff;
        }
        prop_assert!(last <= 1e-4 * ratios[0].max(1e-12) + 1e-12, "gain jump {last:e}");
        let first = ratios[0];
        prop_assert!(ratios.iter().all(|r| *r <= 10.0 * first + 1e-8), "ratios {ratios:?}");
        Ok(())
    })
}

/// Switch counts of p-update runs over a list of thresholds.
pub fn switch_counts(model: &SdcModel, x0: &StateVector, q: &DenseMatrix, r: &DenseMatrix, eps: &[f64], cfg: &IntegratorConfig) -> Result<Vec<usize>, String> {
    eps.iter()
        .map(|&e| {
            let ctrl = ControllerState::init(model, x0, q, r, e, ControlMode::PUpdate, ControllerOptions::default()).map_err(|err| err.to_string())?;
            let run = integrate_closed_loop(model, ctrl, x0, cfg, false).map_err(|err| format!("eps = {e}: {err}"))?;
            Ok(run.trajectory.fb_switches)
        })
        .collect()
}

pub fn prop_switches_monotone_in_eps() -> Check {
    let m = chaffee_infante_model(20).unwrap();
    let mut cfg = IntegratorConfig::new(1e-6, 1e-6, 3.0);
    cfg.tol_scaling = 10.0;
    let eps = [0.1, 0.3, 0.5, 0.7, 0.9];
    let counts = switch_counts(&m, &chaffee_x0(20), &m.output_weight(), &(DenseMatrix::identity(1, 1) * 0.1), &eps, &cfg)?;
    if counts.windows(2).any(|w| w[1] > w[0]) {
        return Err(format!("switch counts {counts:?} for eps {eps:?}"));
    }
    Ok(())
}

// ---------------------------------------------------------------- odeint

pub fn observed_order() -> f64 {
    let errs: Vec<f64> = [0.1, 0.05]
        .iter()
        .map(|&h| {
            let mut cfg = IntegratorConfig::new(1e-6, 1e-6, 1.0);
            cfg.fixed_step = Some(h);
            let tr = integrate(|_t, x: &StateVector| -x, &StateVector::from_element(1, 1.0), &cfg).unwrap();
            (tr.final_state()[0] - (-1.0f64).exp()).abs()
        })
        .collect();
    (errs[0] / errs[1]).log2()
}

pub fn prop_order() -> Check {
    let p = observed_order();
    if p >= 4.5 {
        Ok(())
    } else {
        Err(format!("observed order {p}"))
    }
}

fn random_linear_field(n: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_matrix(n, n, &mut rng) * 2.0 - DenseMatrix::identity(n, n)
}

pub fn prop_feval_count() -> Check {
    run(100, 30, (1usize..=6, any::<u64>(), -10.0f64..-3.0), |(n, seed, lt)| {
        let a = random_linear_field(n, seed);
        let calls = Cell::new(0usize);
        let cfg = IntegratorConfig::new(10f64.powf(lt), 10f64.powf(lt), 2.0);
        let tr = integrate(
            |_t, x: &StateVector| {
                calls.set(calls.get() + 1);
                &a * x
            },
            &StateVector::from_element(n, 1.0),
            &cfg,
        )
        .unwrap();
        prop_assert_eq!(tr.f_evals, calls.get());
        Ok(())
    })
}

fn same_trajectory(a: &Trajectory, b: &Trajectory, len: usize) -> bool {
    a.times[..len].iter().zip(&b.times[..len]).all(|(s, t)| s.to_bits() == t.to_bits())
        && a.states[..len].iter().zip(&b.states[..len]).all(|(x, y)| x.iter().zip(y.iter()).all(|(u, v)| u.to_bits() == v.to_bits()))
}

pub fn prop_determinism() -> Check {
    run(100, 31, (1usize..=6, any::<u64>()), |(n, seed)| {
        let a = random_linear_field(n, seed);
        let f = |_t: f64, x: &StateVector| &a * x + x.map(|v| 0.1 * v * v);
        let cfg = IntegratorConfig::new(1e-7, 1e-9, 3.0);
        let x0 = StateVector::from_element(n, 0.5);
        let r1 = integrate(f, &x0, &cfg).unwrap();
        let r2 = integrate(f, &x0, &cfg).unwrap();
        prop_assert_eq!(r1.times.len(), r2.times.len());
        prop_assert!(same_trajectory(&r1, &r2, r1.times.len()));
        prop_assert_eq!(r1.f_evals, r2.f_evals);
        Ok(())
    })
}

pub fn prop_escape_prefix() -> Check {
    run(100, 32, (0.5f64..2.0, 1.0f64..4.0, 0.3f64..3.0), |(x0, e1, factor)| {
        let f = |_t: f64, x: &StateVector| x.map(|v| v * v);
        let mut c1 = IntegratorConfig::new(1e-8, 1e-10, 10.0);
        c1.escape_norm = 10f64.powf(e1);
        let mut c2 = c1;
        c2.escape_norm = c1.escape_norm * 10f64.powf(factor);
        let x0 = StateVector::from_element(1, x0);
        let r1 = integrate(f, &x0, &c1).unwrap();
        let r2 = integrate(f, &x0, &c2).unwrap();
        prop_assert_eq!(r1.terminated, Termination::Escaped);
        prop_assert!(r2.times.len() >= r1.times.len());
        prop_assert!(same_trajectory(&r1, &r2, r1.times.len()));
        Ok(())
    })
}

// ---------------------------------------------------------------- certify

pub fn prop_omega_star_monotone() -> Check {
    run(100, 40, (1.0f64..100.0, 0.0f64..10.0, -1.0f64..2.0, 0.1f64..10.0, 0.01f64..5.0), |(k, m, w, t, d)| {
        let base = omega_star(k, m, w, t);
        prop_assert!(omega_star(k + d, m, w, t) > base);
        prop_assert!(omega_star(k, m + d, w, t) > base);
        prop_assert!(omega_star(k, m, w + d, t) < base);
        Ok(())
    })
}

pub fn oscillator_ensemble(radius: f64) -> Vec<Trajectory> {
    let osc = oscillator_model(0.4).unwrap();
    let cfg = IntegratorConfig::new(1e-8, 1e-10, 10.0);
    scaled_ring_grid(radius).iter().map(|x| integrate_open_loop(&osc, x, &cfg).unwrap()).collect()
}

pub fn prop_mt_grid_refinement() -> Check {
    let osc = oscillator_model(0.4).unwrap();
    let trs = oscillator_ensemble(0.25);
    run(100, 41, (0.5f64..10.0, 0.05f64..0.95), |(t, c)| {
        let nodes = (2000.0 * t / 10.0).ceil() as usize;
        let coarse = estimate_mt(&trs, &osc, 0.3, t, c * t, nodes).unwrap();
        let fine = estimate_mt(&trs, &osc, 0.3, t, c * t, 4 * nodes).unwrap();
        prop_assert!((coarse - fine).abs() <= 1e-4 * fine.abs().max(1e-300), "{coarse} vs {fine}");
        Ok(())
    })
}

pub fn oscillator_certificate(radius: f64) -> Certificate {
    let osc = oscillator_model(0.4).unwrap();
    let spec = EnsembleSpec::new(scaled_ring_grid(radius), 10.0);
    certify_ensemble(&osc, &spec, &IntegratorConfig::new(1e-8, 1e-10, 10.0)).unwrap()
}

pub fn check_decay_self_consistency(cert: &Certificate) -> Check {
    let t_star = cert.t_star.ok_or("no tStar")?;
    let i = cert.times.iter().position(|t| *t == t_star).unwrap();
    let w_star = -cert.minus_omega_star[i];
    let horizon = *cert.times.last().unwrap();
    for (m, tr) in cert.trajectories.iter().enumerate() {
        let n0 = tr.states[0].norm();
        let mut k = 1;
        while k as f64 * t_star <= horizon + 1e-12 {
            let t = k as f64 * t_star;
            let n = tr.sample(t).norm();
            let bound = n0 * (-w_star * t).exp() * 1.05;
            if n > bound {
                return Err(format!("member {m}: |x({t})| = {n} above {bound}"));
            }
            k += 1;
        }
    }
    Ok(())
}

pub fn check_curves_nondecreasing(cert: &Certificate) -> Check {
    let mono = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0]);
    if !mono(&cert.k_curve) {
        return Err("K curve decreases".into());
    }
    if !mono(&cert.big_m_curve) {
        return Err("M_t curve decreases".into());
    }
    Ok(())
}

pub fn prop_constant_matrix_global_exponent() -> Check {
    run(100, 42, (2usize..=3, any::<u64>()), |(n, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = random_matrix(n, n, &mut rng);
        let a = &raw - DenseMatrix::identity(n, n) * (spectral_abscissa(&raw).unwrap() + 0.5);
        let m = SdcModel::linear("const", a, DenseMatrix::zeros(n, 0), DenseMatrix::zeros(0, n)).unwrap();
        let init: Vec<StateVector> = (0..3).map(|_| StateVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))).collect();
        let mut spec = EnsembleSpec::new(init, 4.0);
        spec.eval_points = 10;
        spec.quadrature_grid = 200;
        spec.k_samples = 100;
        let cert = certify_ensemble(&m, &spec, &IntegratorConfig::new(1e-6, 1e-8, 4.0)).unwrap();
        prop_assert_eq!(cert.l, 0.0);
        prop_assert_eq!(cert.global_exponent, -cert.omega);
        Ok(())
    })
}

// ---------------------------------------------------------------- bench

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
}

pub fn prop_csv_round_trip() -> Check {
    run(100, 50, prop::collection::vec((finite(), prop::collection::vec(finite(), 3), finite(), any::<bool>()), 0..20), |rows| {
        let rows: Vec<records::TrajectoryRow> = rows.into_iter().map(|(t, x, norm_x, switch_flag)| records::TrajectoryRow { t, x, norm_x, switch_flag }).collect();
        let mut buf = Vec::new();
        records::write_trajectory_csv(&mut buf, &rows).unwrap();
        prop_assert_eq!(records::read_trajectory_csv(buf.as_slice()).unwrap(), rows);
        Ok(())
    })?;
    run(100, 51, prop::collection::vec((finite(), finite(), finite(), finite(), finite()), 0..20), |rows| {
        let rows: Vec<records::CertificateRow> =
            rows.into_iter().map(|(t, k, m_t, big_m_t, minus_omega_star)| records::CertificateRow { t, k, m_t, big_m_t, minus_omega_star }).collect();
        let mut buf = Vec::new();
        records::write_certificate_csv(&mut buf, &rows).unwrap();
        prop_assert_eq!(records::read_certificate_csv(buf.as_slice()).unwrap(), rows);
        Ok(())
    })?;
    run(100, 52, prop::collection::vec((any::<usize>(), finite(), finite(), finite()), 0..20), |rows| {
        let rows: Vec<records::SwitchRow> = rows.into_iter().map(|(index, t, k, omega)| records::SwitchRow { index, t, k, omega }).collect();
        let mut buf = Vec::new();
        records::write_switches_csv(&mut buf, &rows).unwrap();
        prop_assert_eq!(records::read_switches_csv(buf.as_slice()).unwrap(), rows);
        Ok(())
    })?;
    let row = ("[a-z-]{1,10}", 1usize..1000, finite(), prop::option::of(0usize..100), any::<usize>(), finite(), "[a-z]{1,10}", prop::option::of("[ -~]{1,30}"));
    run(100, 53, prop::collection::vec(row, 0..10), |rows| {
        let rows: Vec<records::BenchmarkRow> = rows
            .into_iter()
            .map(|(scheme, n, epsilon, fb_switches, f_evals, wall_time, terminated, error)| records::BenchmarkRow {
                scheme,
                n,
                epsilon,
                fb_switches,
                f_evals,
                wall_time,
                terminated,
                error: error.filter(|e| !e.is_empty()),
            })
            .collect();
        let mut buf = Vec::new();
        records::write_benchmark_csv(&mut buf, &rows).unwrap();
        prop_assert_eq!(records::read_benchmark_csv(buf.as_slice()).unwrap(), rows);
        Ok(())
    })
}

/// Emitted files re-parse into the records they were written from.
pub fn check_emitted_files_round_trip(dir: &Path) -> Check {
    let cfg = ExperimentConfig::from_toml_str(&format!(
        "model = \"chaffee\"\nelements = 8\nmode = \"p-update\"\nepsilon = 0.3\noutput = \"{}\"\n",
        dir.display()
    ))
    .map_err(|e| e.to_string())?;
    bench::cmd_simulate(&cfg).map_err(|e| e.to_string())?;
    let exp = bench::Experiment::resolve(&cfg).map_err(|e| e.to_string())?;
    let out = bench::run_experiment(&exp).map_err(|e| e.to_string())?;
    let rows = bench::trajectory_rows(&exp, &out.trajectory);
    let read = records::read_trajectory_csv(std::fs::File::open(dir.join("trajectory.csv")).unwrap()).map_err(|e| e.to_string())?;
    if read != rows {
        return Err("trajectory.csv differs from the run".into());
    }
    let switches = bench::switch_rows(&out.trajectory, &out.steps);
    let read = records::read_switches_csv(std::fs::File::open(dir.join("switches.csv")).unwrap()).map_err(|e| e.to_string())?;
    // NaN entries compare unequal; compare bit patterns
    let same = read.len() == switches.len()
        && read.iter().zip(&switches).all(|(a, b)| a.index == b.index && a.t == b.t && a.k.to_bits() == b.k.to_bits() && a.omega.to_bits() == b.omega.to_bits());
    if !same {
        return Err("switches.csv differs from the run".into());
    }
    Ok(())
}

/// Drops JSON fields and CSV columns that carry wall times.
pub fn strip_wall_time(name: &str, text: &str) -> String {
    if name.ends_with(".json") {
        text.lines().filter(|l| !l.contains("wall_time")).collect::<Vec<_>>().join("\n")
    } else if name == "benchmark.csv" {
        text.lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split(',').collect();
                if f.len() > 5 {
                    f.remove(5);
                }
                f.join(",")
            })
            .collect::<Vec<_>>()
            .join("\n")
    } else if name == "benchmark.txt" {
        text.lines().map(|l| l.split_whitespace().filter(|w| !w.ends_with('s') || w.parse::<f64>().is_ok()).collect::<Vec<_>>().join(" ")).collect::<Vec<_>>().join("\n")
    } else {
        text.to_string()
    }
}

pub fn check_reproducible(make_cfg: impl Fn(&Path) -> ExperimentConfig, command: fn(&ExperimentConfig) -> Check, a: &Path, b: &Path) -> Check {
    command(&make_cfg(a))?;
    command(&make_cfg(b))?;
    let mut names: Vec<String> = std::fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    if names.is_empty() {
        return Err("no files written".into());
    }
    for name in names {
        let ta = std::fs::read_to_string(a.join(&name)).unwrap();
        let tb = std::fs::read_to_string(b.join(&name)).map_err(|e| format!("{name}: {e}"))?;
        if strip_wall_time(&name, &ta) != strip_wall_time(&name, &tb) {
            return Err(format!("{name} differs between identical runs"));
        }
    }
    Ok(())
}

pub fn simulate_cmd(cfg: &ExperimentConfig) -> Check {
    bench::cmd_simulate(cfg).map(|_| ()).map_err(|e| e.to_string())
}

pub fn certify_cmd(cfg: &ExperimentConfig) -> Check {
    bench::cmd_certify(cfg).map(|_| ()).map_err(|e| e.to_string())
}

pub fn benchmark_cmd(cfg: &ExperimentConfig) -> Check {
    bench::cmd_benchmark(cfg).map(|_| ()).map_err(|e| e.to_string())
}

pub fn config_in(text: &str, dir: &Path) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!("output = \"{}\"\n{text}\n", dir.display())).unwrap()
}

pub fn check_reproducibility_all() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dirs: Vec<_> = (0..6).map(|i| root.path().join(format!("run{i}"))).collect();
    check_reproducible(|d| config_in("model = \"chaffee\"\nelements = 8\nmode = \"p-update\"\nepsilon = 0.3\nseed = 7", d), simulate_cmd, &dirs[0], &dirs[1])?;
    check_reproducible(
        |d| config_in("model = \"oscillator\"\nseed = 7\n[certify]\nrings = [[0.25, 4], [0.1, 2]]\nhorizon = 4.0\neval_points = 20", d),
        certify_cmd,
        &dirs[2],
        &dirs[3],
    )?;
    check_reproducible(
        |d| config_in("model = \"chaffee\"\nelements = 8\nseed = 7\n[benchmark]\nepsilons = [0.5, 0.9]\nsizes = [6, 8]", d),
        benchmark_cmd,
        &dirs[4],
        &dirs[5],
    )
}

pub fn check_preset_fidelity() -> Check {
    let exp = bench::Experiment::resolve(&ExperimentConfig { model: Some("banks5d".into()), ..Default::default() }).map_err(|e| e.to_string())?;
    if exp.x0.as_slice() != [-1.3, -1.4, -1.1, -2.0, 0.3] {
        return Err(format!("x0 = {:?}", exp.x0.as_slice()));
    }
    Ok(())
}

/// Every invariant, by name.
pub fn all_invariants() -> Vec<(&'static str, fn() -> Check)> {
    vec![
        ("care residual and stability", prop_care_residual_and_stability),
        ("sylvester matches kronecker", prop_sylvester_matches_kronecker),
        ("expm semigroup", prop_expm_semigroup),
        ("transient bound on fresh samples", prop_transient_bound_holds_on_fresh_samples),
        ("separation zero iff overlap", prop_separation_zero_iff_overlap),
        ("builtin coefficients finite and lipschitz", prop_builtin_coefficients_finite_and_lipschitz),
        ("fem forms definite", prop_fem_forms_definite),
        ("banks5d controllable and observable", prop_banks5d_controllable_and_observable),
        ("zero gain is open loop bitwise", prop_zero_gain_is_open_loop_bitwise),
        ("update sylvester residual", prop_update_sylvester_residual),
        ("reset correctness", prop_reset_correctness),
        ("class membership along banks5d run", prop_class_membership_banks5d),
        ("gain continuity", prop_gain_continuity),
        ("switches monotone in eps", prop_switches_monotone_in_eps),
        ("integrator order", prop_order),
        ("f-eval count", prop_feval_count),
        ("determinism", prop_determinism),
        ("escape prefix", prop_escape_prefix),
        ("omega star monotone", prop_omega_star_monotone),
        ("m_t grid refinement", prop_mt_grid_refinement),
        ("decay self-consistency", || check_decay_self_consistency(&oscillator_certificate(0.25))),
        ("curves nondecreasing", || {
            check_curves_nondecreasing(&oscillator_certificate(0.25))?;
            check_curves_nondecreasing(&oscillator_certificate(2.0))
        }),
        ("constant matrix global exponent", prop_constant_matrix_global_exponent),
        ("csv round trip", || {
            prop_csv_round_trip()?;
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            check_emitted_files_round_trip(dir.path())
        }),
        ("reproducibility", check_reproducibility_all),
        ("preset fidelity", check_preset_fidelity),
    ]
}

/// Invariants that cannot hold for the five-state model as specified: its
/// fifth state is neither observed nor coupled, and the fourth state loses
/// controllability where `ξ₁` crosses zero, which stops every closed-loop run.
pub const KNOWN_UNATTAINABLE: [&str; 2] = ["banks5d controllable and observable", "class membership along banks5d run"];
