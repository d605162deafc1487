//! Numerical evaluation of decay certificates for ensembles of SDC
//! trajectories: class constants `K`, `L`, `M_t`, the dynamic bound `m_t`
//! and the discrete-grid decay exponent `ω*`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::feedback::sdre_gain;
use crate::matkit::{operator_norm, spectral_abscissa, transient_bound, DenseMatrix, MatError, StateVector};
use crate::model::{ModelError, SdcModel};
use crate::odeint::{integrate_open_loop, IntegratorConfig, OdeError, Termination, Trajectory};

const ABSCISSA_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CertifyError {
    #[error("invalid ensemble: {0}")]
    InvalidSpec(String),
    #[error("all sample states coincide")]
    DegenerateSamples,
    #[error("trajectory covers [0, {covered}] but t = {t} was requested")]
    HorizonExceeded { t: f64, covered: f64 },
    #[error("A(x) at t = {time} has spectral abscissa {abscissa}, above -omega = {}", -omega)]
    PointwiseInstability { state: Vec<f64>, time: f64, abscissa: f64, omega: f64 },
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `count` equally spaced points on each circle of the given radius,
/// starting at angle 0, concatenated in order.
pub fn ring_grid_2d(radii: &[(f64, usize)]) -> Vec<StateVector> {
    let mut out = Vec::new();
    for &(r, count) in radii {
        for k in 0..count {
            let (s, c) = (2.0 * std::f64::consts::PI * k as f64 / count as f64).sin_cos();
            out.push(StateVector::from_vec(vec![r * c, r * s]));
        }
    }
    out
}

/// The three-ring grid scaled to an outer radius: 12, 8 and 4 points at
/// `r`, `0.68r` and `0.32r`.
pub fn scaled_ring_grid(radius: f64) -> Vec<StateVector> {
    ring_grid_2d(&[(radius, 12), (0.68 * radius, 8), (0.32 * radius, 4)])
}

/// Uniform random points on concentric spheres in `R^n`.
pub fn sphere_grid(n: usize, radii: &[(f64, usize)], seed: u64) -> Vec<StateVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &(r, count) in radii {
        for _ in 0..count {
            let v = loop {
                let v = StateVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
                if v.norm() > 1e-12 {
                    break v;
                }
            };
            out.push(v.normalize() * r);
        }
    }
    out
}

/// Largest quotient `‖A(xᵢ)−A(xⱼ)‖₂ / ‖xᵢ−xⱼ‖₂` over distinct pairs. This
/// is a lower bound for the Lipschitz constant of `A`.
pub fn estimate_l(model: &SdcModel, samples: &[StateVector]) -> Result<f64, CertifyError> {
    if samples.len() < 2 {
        return Err(CertifyError::InvalidSpec("need at least two sample states".into()));
    }
    let coeffs: Vec<DenseMatrix> = samples.iter().map(|x| model.coefficient_at(x)).collect();
    let mut best = 0.0f64;
    let mut distinct = false;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let d = (&samples[i] - &samples[j]).norm();
            if d == 0.0 {
                continue;
            }
            distinct = true;
            best = best.max(operator_norm(&(&coeffs[i] - &coeffs[j])) / d);
        }
    }
    if !distinct {
        return Err(CertifyError::DegenerateSamples);
    }
    Ok(best)
}

fn check_coverage(trajectories: &[Trajectory], t: f64) -> Result<(), CertifyError> {
    for tr in trajectories {
        let covered = tr.final_time();
        if covered < t * (1.0 - 1e-12) {
            return Err(CertifyError::HorizonExceeded { t, covered });
        }
    }
    Ok(())
}

/// `max ‖A(x)x‖₂` over all stored states with time `≤ t`.
pub fn estimate_mt_bound(trajectories: &[Trajectory], model: &SdcModel, t: f64) -> Result<f64, CertifyError> {
    check_coverage(trajectories, t)?;
    let mut best = 0.0f64;
    for tr in trajectories {
        for (s, x) in tr.times.iter().zip(&tr.states) {
            if *s > t {
                break;
            }
            best = best.max(model.drift(x).norm());
        }
    }
    Ok(best)
}

fn pointwise_k(model: &SdcModel, x: &StateVector, time: f64, omega: f64, samples: usize) -> Result<f64, CertifyError> {
    let a = model.coefficient_at(x);
    let abscissa = spectral_abscissa(&a)?;
    if abscissa > -omega + ABSCISSA_SLACK * (1.0 + omega.abs()) {
        return Err(CertifyError::PointwiseInstability { state: x.iter().copied().collect(), time, abscissa, omega });
    }
    let tau_max = if omega > 0.0 { 20.0 / omega } else { 20.0 };
    Ok(transient_bound(&a, omega, tau_max, samples)?)
}

/// Default number of `τ` samples per state in [`estimate_k_along`].
pub const K_SAMPLES: usize = 400;

/// `max` of the pointwise transient bound of `A(ξ(s))` over stored states
/// with `s ≤ t`.
pub fn estimate_k_along(trajectories: &[Trajectory], model: &SdcModel, omega: f64, t: f64) -> Result<f64, CertifyError> {
    check_coverage(trajectories, t)?;
    let mut best = 1.0f64;
    for tr in trajectories {
        for (s, x) in tr.times.iter().zip(&tr.states) {
            if *s > t {
                break;
            }
            best = best.max(pointwise_k(model, x, *s, omega, K_SAMPLES)?);
        }
    }
    Ok(best)
}

/// Trapezoid weights on the nodes.
fn trapezoid(nodes: &[f64], values: &[f64]) -> f64 {
    nodes.windows(2).zip(values.windows(2)).map(|(s, v)| 0.5 * (s[1] - s[0]) * (v[0] + v[1])).sum()
}

fn quadrature_nodes(t: f64, rho: f64, count: usize) -> Vec<f64> {
    let count = count.max(2);
    let mut nodes: Vec<f64> = (0..count).map(|i| t * i as f64 / (count - 1) as f64).collect();
    if rho > 0.0 && rho < t {
        let k = nodes.partition_point(|&s| s < rho);
        if (nodes[k] - rho).abs() > 1e-14 * t {
            nodes.insert(k, rho);
        }
    }
    nodes
}

/// Per-trajectory numerator and denominator of the `m_t` ratio.
fn mt_parts(tr: &Trajectory, model: &SdcModel, omega: f64, t: f64, rho: f64, nodes: &[f64]) -> (f64, f64) {
    let a_rho = model.coefficient_at(&tr.sample(rho));
    let mut num = Vec::with_capacity(nodes.len());
    let mut den = Vec::with_capacity(nodes.len());
    for &s in nodes {
        let x = tr.sample(s);
        let w = (-omega * (t - s)).exp() * x.norm();
        num.push(w * operator_norm(&(model.coefficient_at(&x) - &a_rho)));
        den.push(w * (s - rho).abs());
    }
    (trapezoid(nodes, &num), trapezoid(nodes, &den))
}

/// Dynamic replacement for `L·M_t`: the sup over trajectories of
///
/// `∫₀ᵗ e^{−ω(t−s)}‖A(ξ(s))−A(ξ(ρ))‖‖ξ(s)‖ds / ∫₀ᵗ e^{−ω(t−s)}|s−ρ|‖ξ(s)‖ds`
///
/// by the composite trapezoid rule on `nodes` uniform points of `[0, t]`
/// (plus `ρ`). A trajectory with zero denominator contributes 0.
pub fn estimate_mt(
    trajectories: &[Trajectory],
    model: &SdcModel,
    omega: f64,
    t: f64,
    rho: f64,
    nodes: usize,
) -> Result<f64, CertifyError> {
    if !(t > 0.0) || !(rho >= 0.0) {
        return Err(CertifyError::InvalidSpec(format!("need t > 0 and rho >= 0, got t = {t}, rho = {rho}")));
    }
    check_coverage(trajectories, t.max(rho))?;
    let grid = quadrature_nodes(t, rho, nodes);
    let mut best = 0.0f64;
    for tr in trajectories {
        let (num, den) = mt_parts(tr, model, omega, t, rho, &grid);
        if den > 0.0 {
            best = best.max(num / den);
        }
    }
    Ok(best)
}

/// `−ω* = log K / t* + √(K·m·log 2) − ω`.
pub fn omega_star(k: f64, m: f64, omega: f64, t_star: f64) -> f64 {
    k.ln() / t_star + (k * m * std::f64::consts::LN_2).sqrt() - omega
}

/// Exponent `√(K·L·M·log 2) − ω` of the global bound; negative certifies
/// uniform exponential stability.
pub fn global_decay_exponent(k: f64, l: f64, m: f64, omega: f64) -> f64 {
    (k * l * m * std::f64::consts::LN_2).sqrt() - omega
}

/// How `ρ` is chosen for each evaluation time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoRule {
    /// `ρ = c·t`.
    Proportional(f64),
    /// Minimize over `ρ/t ∈ {0.1, …, 0.9}`.
    Scan,
}

#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    pub initial_states: Vec<StateVector>,
    pub horizon: f64,
    pub rho: RhoRule,
    /// `None` uses the negated worst pointwise abscissa over the ensemble.
    pub omega_target: Option<f64>,
    /// Quadrature points per horizon.
    pub quadrature_grid: usize,
    /// Number of evaluation times on `(0, horizon]`.
    pub eval_points: usize,
    pub k_samples: usize,
}

impl EnsembleSpec {
    pub fn new(initial_states: Vec<StateVector>, horizon: f64) -> Self {
        EnsembleSpec {
            initial_states,
            horizon,
            rho: RhoRule::Proportional(0.55),
            omega_target: None,
            quadrature_grid: 2000,
            eval_points: 100,
            k_samples: K_SAMPLES,
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), CertifyError> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(CertifyError::InvalidSpec(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.initial_states.is_empty() {
            return Err(CertifyError::InvalidSpec("no initial states".into()));
        }
        if let Some(x) = self.initial_states.iter().find(|x| x.len() != n) {
            return Err(CertifyError::InvalidSpec(format!("initial state of length {} for a {n}-state model", x.len())));
        }
        if let RhoRule::Proportional(c) = self.rho {
            if !(c >= 0.0) {
                return Err(CertifyError::InvalidSpec(format!("rho factor must be nonnegative, got {c}")));
            }
        }
        if self.eval_points == 0 || self.quadrature_grid < 2 || self.k_samples < 2 {
            return Err(CertifyError::InvalidSpec("grid sizes too small".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Certified,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Certified => "certified",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WitnessKind {
    Escaped,
    NotDecaying,
}

/// An ensemble member that rules out a certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub kind: WitnessKind,
    pub member: usize,
    pub initial_state: Vec<f64>,
    pub time: f64,
    pub norm: f64,
}

#[derive(Debug, Clone)]
pub struct Certificate {
    pub omega: f64,
    /// `K(t)` at `tStar`, or at the last evaluation time.
    pub k: f64,
    /// Lower estimate of the Lipschitz constant from sampled states.
    pub l: f64,
    pub times: Vec<f64>,
    pub k_curve: Vec<f64>,
    /// `M_t` over `X_[0,t]`.
    pub big_m_curve: Vec<f64>,
    /// Dynamic bound `m_t`.
    pub m_curve: Vec<f64>,
    pub rho_curve: Vec<f64>,
    /// `√(K(t)·m_t·log 2) − ω`; negative is the first decay condition.
    pub omega_t: Vec<f64>,
    pub minus_omega_star: Vec<f64>,
    pub t_star: Option<f64>,
    pub verdict: Verdict,
    /// `√(K·L·M·log 2) − ω` with the constants over the whole horizon.
    pub global_exponent: f64,
    pub witness: Option<Witness>,
    pub trajectories: Vec<Trajectory>,
}

/// Wraps a model so that its coefficient is the SDRE closed loop
/// `A(x) − B·F(x)`. States where the Riccati solve fails map to NaN.
pub fn sdre_closed_loop_model(model: &SdcModel, q: DenseMatrix, r: DenseMatrix) -> Result<SdcModel, CertifyError> {
    let inner = model.clone();
    let n = model.n;
    let coefficient = Arc::new(move |x: &StateVector| match sdre_gain(&inner, x, &q, &r) {
        Ok(rep) => inner.coefficient_at(x) - &inner.b * rep.f,
        Err(_) => DenseMatrix::from_element(n, n, f64::NAN),
    });
    let mut out = SdcModel::new(format!("{}-sdre", model.name), n, coefficient, DenseMatrix::zeros(n, 0), model.c.clone())?;
    out.mass_matrix = model.mass_matrix.clone();
    Ok(out)
}

fn strided<T: Clone>(items: &[T], max: usize) -> Vec<T> {
    if items.len() <= max {
        return items.to_vec();
    }
    let stride = items.len().div_ceil(max);
    items.iter().step_by(stride).cloned().collect()
}

/// Integrates the ensemble over `[0, horizon]` and evaluates the decay
/// certificate on `eval_points` equally spaced times.
pub fn certify_ensemble(model: &SdcModel, spec: &EnsembleSpec, cfg: &IntegratorConfig) -> Result<Certificate, CertifyError> {
    spec.validate(model.n)?;
    let mut run_cfg = *cfg;
    run_cfg.t_max = spec.horizon;
    let mut trajectories = Vec::with_capacity(spec.initial_states.len());
    for x0 in &spec.initial_states {
        trajectories.push(integrate_open_loop(model, x0, &run_cfg)?);
    }

    let mut witness = None;
    for (i, tr) in trajectories.iter().enumerate() {
        let n0 = tr.states[0].norm();
        let nf = tr.final_state().norm();
        let kind = if tr.terminated == Termination::Escaped {
            Some(WitnessKind::Escaped)
        } else if n0 > 0.0 && nf >= n0 {
            Some(WitnessKind::NotDecaying)
        } else {
            None
        };
        if let Some(kind) = kind {
            witness = Some(Witness { kind, member: i, initial_state: tr.states[0].iter().copied().collect(), time: tr.final_time(), norm: nf });
            if kind == WitnessKind::Escaped {
                break;
            }
        }
    }
    let covered = trajectories.iter().map(|t| t.final_time()).fold(spec.horizon, f64::min);

    // pointwise data at every stored state, in a fixed order
    let mut worst_abscissa = f64::NEG_INFINITY;
    for tr in &trajectories {
        for x in &tr.states {
            let s = spectral_abscissa(&model.coefficient_at(x))?;
            worst_abscissa = worst_abscissa.max(s);
        }
    }
    let omega = spec.omega_target.unwrap_or(-worst_abscissa);

    let mut pointwise: Vec<(f64, f64, f64)> = Vec::new(); // (time, K, ‖A(x)x‖)
    for tr in &trajectories {
        for (s, x) in tr.times.iter().zip(&tr.states) {
            let k = pointwise_k(model, x, *s, omega, spec.k_samples)?;
            pointwise.push((*s, k, model.drift(x).norm()));
        }
    }
    pointwise.sort_by(|a, b| a.0.total_cmp(&b.0));

    let times: Vec<f64> = (1..=spec.eval_points)
        .map(|i| spec.horizon * i as f64 / spec.eval_points as f64)
        .filter(|&t| t <= covered * (1.0 + 1e-12))
        .collect();
    let mut k_curve = Vec::with_capacity(times.len());
    let mut big_m_curve = Vec::with_capacity(times.len());
    let (mut k_run, mut m_run, mut idx) = (1.0f64, 0.0f64, 0);
    for &t in &times {
        while idx < pointwise.len() && pointwise[idx].0 <= t {
            k_run = k_run.max(pointwise[idx].1);
            m_run = m_run.max(pointwise[idx].2);
            idx += 1;
        }
        k_curve.push(k_run);
        big_m_curve.push(m_run);
    }

    let mut m_curve = Vec::with_capacity(times.len());
    let mut rho_curve = Vec::with_capacity(times.len());
    for &t in &times {
        let nodes = ((spec.quadrature_grid as f64 * t / spec.horizon).ceil() as usize).max(8);
        let candidates: Vec<f64> = match spec.rho {
            RhoRule::Proportional(c) => vec![c * t],
            RhoRule::Scan => (1..=9).map(|i| 0.1 * i as f64 * t).collect(),
        };
        let mut best = (f64::INFINITY, 0.0);
        for rho in candidates {
            let m = estimate_mt(&trajectories, model, omega, t, rho, nodes)?;
            if m < best.0 {
                best = (m, rho);
            }
        }
        m_curve.push(best.0);
        rho_curve.push(best.1);
    }

    let ln2 = std::f64::consts::LN_2;
    let omega_t: Vec<f64> = k_curve.iter().zip(&m_curve).map(|(k, m)| (k * m * ln2).sqrt() - omega).collect();
    let minus_omega_star: Vec<f64> =
        times.iter().zip(k_curve.iter().zip(&m_curve)).map(|(t, (k, m))| omega_star(*k, *m, omega, *t)).collect();
    let hit = (0..times.len()).find(|&i| minus_omega_star[i] < 0.0 && omega_t[i] < 0.0);
    let t_star = hit.map(|i| times[i]);
    let k = match hit {
        Some(i) => k_curve[i],
        None => k_curve.last().copied().unwrap_or(1.0),
    };

    let samples: Vec<StateVector> = strided(&trajectories.iter().flat_map(|t| t.states.iter().cloned()).collect::<Vec<_>>(), 400);
    let l = match estimate_l(model, &samples) {
        Ok(l) => l,
        Err(CertifyError::DegenerateSamples) => 0.0,
        Err(e) => return Err(e),
    };
    let k_all = k_curve.last().copied().unwrap_or(1.0);
    let m_all = big_m_curve.last().copied().unwrap_or(0.0);
    let global_exponent = global_decay_exponent(k_all, l, m_all, omega);

    let escaped = matches!(&witness, Some(w) if w.kind == WitnessKind::Escaped);
    let verdict = if t_star.is_some() && !escaped { Verdict::Certified } else { Verdict::Inconclusive };
    Ok(Certificate {
        omega,
        k,
        l,
        times,
        k_curve,
        big_m_curve,
        m_curve,
        rho_curve,
        omega_t,
        minus_omega_star,
        t_star,
        verdict,
        global_exponent,
        witness,
        trajectories,
    })
}
