//! Experiment orchestration behind the `sdcstab` command line: config
//! resolution, simulation, certification and benchmark tables.

pub mod config;
pub mod model_file;
pub mod records;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

pub use config::{Experiment, ExperimentConfig, Mode, ModelKind, NormKind, OUT_ENV};
pub use model_file::{load_model_file, parse_model_str};
pub use records::{BenchmarkRow, CertificateRow, SwitchRow, TrajectoryRow};

use crate::certify::{certify_ensemble, scaled_ring_grid, sdre_closed_loop_model, sphere_grid, EnsembleSpec, RhoRule, WitnessKind};
use crate::feedback::ControllerState;
use crate::odeint::{integrate_closed_loop, integrate_open_loop, StepReport, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown model '{0}' (expected banks5d, chaffee, oscillator or a .toml model file)")]
    ModelUnknown(String),
    #[error("parse error at line {line}, column {col}: {message}")]
    Parse { line: usize, col: usize, message: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl BenchError {
    /// 1 for configuration problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

fn io<E: std::fmt::Display>(e: E) -> BenchError {
    BenchError::Io(e.to_string())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, BenchError> {
    File::create(dir.join(name)).map(BufWriter::new).map_err(|e| BenchError::Io(format!("{}: {e}", dir.join(name).display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), BenchError> {
    let text = serde_json::to_string_pretty(value).map_err(io)?;
    fs::write(dir.join(name), text + "\n").map_err(io)
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub model: String,
    pub mode: String,
    pub epsilon: Option<f64>,
    pub n: usize,
    pub seed: u64,
    pub f_evals: usize,
    pub fb_switches: usize,
    pub wall_time: f64,
    pub terminated: String,
    pub final_time: f64,
    pub initial_norm: f64,
    pub final_norm: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub error: Option<String>,
}

/// Trajectory and step log of one simulation.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub steps: Vec<StepReport>,
}

/// Integrates one resolved experiment.
pub fn run_experiment(exp: &Experiment) -> Result<RunOutcome, BenchError> {
    let num = |e: &dyn std::fmt::Display| BenchError::Numerical(e.to_string());
    match exp.control_mode() {
        None => {
            let trajectory = integrate_open_loop(&exp.model, &exp.x0, &exp.integrator).map_err(|e| num(&e))?;
            Ok(RunOutcome { trajectory, steps: Vec::new() })
        }
        Some(mode) => {
            let ctrl = ControllerState::init(&exp.model, &exp.x0, &exp.q, &exp.r, exp.epsilon.unwrap_or(0.0), mode, exp.options)
                .map_err(|e| num(&e))?;
            let run = integrate_closed_loop(&exp.model, ctrl, &exp.x0, &exp.integrator, false).map_err(|e| num(&e))?;
            Ok(RunOutcome { trajectory: run.trajectory, steps: run.steps })
        }
    }
}

fn summary_of(exp: &Experiment, out: Option<&RunOutcome>, error: Option<String>) -> RunSummary {
    let mass = exp.norm == NormKind::Mass;
    let initial_norm = exp.model.state_norm(&exp.x0, mass);
    let mut s = RunSummary {
        model: exp.model.name.clone(),
        mode: exp.mode.as_str().into(),
        epsilon: exp.epsilon,
        n: exp.model.n,
        seed: exp.seed,
        f_evals: 0,
        fb_switches: 0,
        wall_time: 0.0,
        terminated: "failed".into(),
        final_time: 0.0,
        initial_norm,
        final_norm: f64::NAN,
        accepted_steps: 0,
        rejected_steps: 0,
        error,
    };
    if let Some(o) = out {
        let t = &o.trajectory;
        s.f_evals = t.f_evals;
        s.fb_switches = t.fb_switches;
        s.wall_time = t.wall_time;
        s.terminated = t.terminated.as_str().into();
        s.final_time = t.final_time();
        s.final_norm = exp.model.state_norm(t.final_state(), mass);
        s.accepted_steps = t.accepted_steps;
        s.rejected_steps = t.rejected_steps;
    }
    s
}

/// Rows of `trajectory.csv` for a run.
pub fn trajectory_rows(exp: &Experiment, traj: &Trajectory) -> Vec<TrajectoryRow> {
    let mass = exp.norm == NormKind::Mass;
    traj.times
        .iter()
        .zip(&traj.states)
        .map(|(t, x)| TrajectoryRow {
            t: *t,
            x: x.iter().copied().collect(),
            norm_x: exp.model.state_norm(x, mass),
            switch_flag: traj.switch_times.contains(t),
        })
        .collect()
}

/// Rows of `switches.csv`: one per feedback reset.
pub fn switch_rows(traj: &Trajectory, steps: &[StepReport]) -> Vec<SwitchRow> {
    traj.switch_times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let rep = steps.iter().find(|s| s.t == t && s.reset);
            SwitchRow { index: i + 1, t, k: rep.map_or(f64::NAN, |r| r.k_tilde), omega: rep.map_or(f64::NAN, |r| r.omega) }
        })
        .collect()
}

/// Runs one simulation and writes `trajectory.csv`, `switches.csv` and
/// `summary.json`. A failed run still writes its summary.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<RunSummary, BenchError> {
    let exp = Experiment::resolve(cfg)?;
    fs::create_dir_all(&exp.output).map_err(io)?;
    match run_experiment(&exp) {
        Ok(out) => {
            records::write_trajectory_csv(create(&exp.output, "trajectory.csv")?, &trajectory_rows(&exp, &out.trajectory))?;
            records::write_switches_csv(create(&exp.output, "switches.csv")?, &switch_rows(&out.trajectory, &out.steps))?;
            let s = summary_of(&exp, Some(&out), None);
            write_json(&exp.output, "summary.json", &s)?;
            Ok(s)
        }
        Err(e) => {
            write_json(&exp.output, "summary.json", &summary_of(&exp, None, Some(e.to_string())))?;
            Err(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WitnessSummary {
    pub kind: String,
    pub member: usize,
    pub initial_state: Vec<f64>,
    pub time: f64,
    pub norm: f64,
}

/// Contents of `certificate.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertifySummary {
    pub model: String,
    pub verdict: String,
    pub t_star: Option<f64>,
    pub omega: f64,
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub global_exponent: f64,
    pub horizon: f64,
    pub members: usize,
    pub rho: String,
    pub seed: u64,
    pub witness: Option<WitnessSummary>,
}

/// Ensemble described by the `[certify]` section of a resolved experiment.
pub fn ensemble_spec(exp: &Experiment) -> EnsembleSpec {
    let c = &exp.certify;
    let n = exp.model.n;
    let initial = match (&c.rings, n) {
        (Some(rings), 2) => crate::certify::ring_grid_2d(rings),
        (Some(rings), _) => sphere_grid(n, rings, exp.seed),
        (None, 2) => scaled_ring_grid(c.radius.unwrap_or(0.25)),
        (None, _) => {
            let r = c.radius.unwrap_or(0.25);
            sphere_grid(n, &[(r, 12), (0.68 * r, 8), (0.32 * r, 4)], exp.seed)
        }
    };
    let mut spec = EnsembleSpec::new(initial, c.horizon.unwrap_or(10.0));
    spec.rho = if c.rho_scan.unwrap_or(false) { RhoRule::Scan } else { RhoRule::Proportional(c.rho.unwrap_or(0.55)) };
    spec.omega_target = c.omega;
    if let Some(q) = c.quadrature_grid {
        spec.quadrature_grid = q;
    }
    if let Some(e) = c.eval_points {
        spec.eval_points = e;
    }
    spec
}

/// Certifies an ensemble and writes `certificate.csv` and
/// `certificate.json`. An inconclusive verdict is not an error.
pub fn cmd_certify(cfg: &ExperimentConfig) -> Result<CertifySummary, BenchError> {
    let exp = Experiment::resolve(cfg)?;
    let base = match exp.norm {
        NormKind::Mass => exp.model.mass_weighted().map_err(|e| BenchError::Config(format!("norm: {e}")))?,
        NormKind::Euclid => exp.model.clone(),
    };
    let model = match exp.mode {
        Mode::OpenLoop => base,
        Mode::Sdre => sdre_closed_loop_model(&base, exp.q.clone(), exp.r.clone()).map_err(|e| BenchError::Config(e.to_string()))?,
        Mode::PUpdate => return Err(BenchError::Config("mode: certificates support open-loop and sdre only".into())),
    };
    let spec = ensemble_spec(&exp);
    let cert = certify_ensemble(&model, &spec, &exp.integrator).map_err(|e| match e {
        crate::certify::CertifyError::InvalidSpec(m) => BenchError::Config(format!("certify: {m}")),
        other => BenchError::Numerical(other.to_string()),
    })?;
    fs::create_dir_all(&exp.output).map_err(io)?;
    let rows: Vec<CertificateRow> = (0..cert.times.len())
        .map(|i| CertificateRow {
            t: cert.times[i],
            k: cert.k_curve[i],
            m_t: cert.m_curve[i],
            big_m_t: cert.big_m_curve[i],
            minus_omega_star: cert.minus_omega_star[i],
        })
        .collect();
    records::write_certificate_csv(create(&exp.output, "certificate.csv")?, &rows)?;
    let summary = CertifySummary {
        model: model.name.clone(),
        verdict: cert.verdict.as_str().into(),
        t_star: cert.t_star,
        omega: cert.omega,
        k: cert.k,
        l: cert.l,
        global_exponent: cert.global_exponent,
        horizon: spec.horizon,
        members: spec.initial_states.len(),
        rho: match spec.rho {
            RhoRule::Proportional(c) => format!("{c}*t"),
            RhoRule::Scan => "scan".into(),
        },
        seed: exp.seed,
        witness: cert.witness.map(|w| WitnessSummary {
            kind: match w.kind {
                WitnessKind::Escaped => "escaped".into(),
                WitnessKind::NotDecaying => "not-decaying".into(),
            },
            member: w.member,
            initial_state: w.initial_state,
            time: w.time,
            norm: w.norm,
        }),
    };
    write_json(&exp.output, "certificate.json", &summary)?;
    Ok(summary)
}

/// Runs the SDRE scheme and the p-update scheme for every requested `ε`
/// at every requested size, writing `benchmark.csv` and `benchmark.txt`
/// after each row. Failed rows carry their error message.
pub fn cmd_benchmark(cfg: &ExperimentConfig) -> Result<Vec<BenchmarkRow>, BenchError> {
    let first = Experiment::resolve(&ExperimentConfig { mode: Some(Mode::Sdre), epsilon: None, ..cfg.clone() })?;
    let epsilons = cfg.benchmark.epsilons.clone().unwrap_or_else(|| match first.kind {
        ModelKind::Chaffee { .. } => vec![0.5, 0.9],
        _ => vec![0.1, 0.5, 0.9],
    });
    if let Some(e) = epsilons.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
        return Err(BenchError::Config(format!("epsilon: {e} is outside (0, 1)")));
    }
    let sizes: Vec<Option<usize>> = match (&first.kind, &cfg.benchmark.sizes) {
        (ModelKind::Chaffee { .. }, Some(s)) if !s.is_empty() => s.iter().map(|n| Some(*n)).collect(),
        _ => vec![None],
    };
    let out_dir = first.output.clone();
    fs::create_dir_all(&out_dir).map_err(io)?;

    let mut rows = Vec::new();
    for size in sizes {
        let mut runs: Vec<(Mode, Option<f64>)> = vec![(Mode::Sdre, None)];
        runs.extend(epsilons.iter().map(|e| (Mode::PUpdate, Some(*e))));
        for (mode, epsilon) in runs {
            let row_cfg = ExperimentConfig { mode: Some(mode), epsilon, elements: size.or(cfg.elements), ..cfg.clone() };
            let exp = Experiment::resolve(&row_cfg)?;
            let mut row = BenchmarkRow {
                scheme: mode.as_str().into(),
                n: exp.model.n,
                epsilon: epsilon.unwrap_or(0.0),
                fb_switches: None,
                f_evals: 0,
                wall_time: 0.0,
                terminated: "failed".into(),
                error: None,
            };
            match run_experiment(&exp) {
                Ok(out) => {
                    let t = out.trajectory;
                    row.fb_switches = (mode == Mode::PUpdate).then_some(t.fb_switches);
                    row.f_evals = t.f_evals;
                    row.wall_time = t.wall_time;
                    row.terminated = t.terminated.as_str().into();
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            rows.push(row);
            records::write_benchmark_csv(create(&out_dir, "benchmark.csv")?, &rows)?;
            fs::write(out_dir.join("benchmark.txt"), records::render_benchmark_table(&rows)).map_err(io)?;
        }
    }
    Ok(rows)
}
