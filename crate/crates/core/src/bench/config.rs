use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::model_file::load_model_file;
use super::BenchError;
use crate::feedback::{ControlMode, ControllerOptions, UpdateNorm};
use crate::matkit::{DenseMatrix, StateVector};
use crate::model::{banks5d_model, banks5d_x0, chaffee_infante_model, chaffee_x0, oscillator_model, SdcModel};
use crate::odeint::IntegratorConfig;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "SDCSTAB_OUT";
const DEFAULT_OUT: &str = "sdcstab-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    OpenLoop,
    Sdre,
    PUpdate,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode, BenchError> {
        match s {
            "open-loop" | "open" => Ok(Mode::OpenLoop),
            "sdre" => Ok(Mode::Sdre),
            "p-update" => Ok(Mode::PUpdate),
            other => Err(BenchError::Config(format!("mode: unknown value '{other}' (expected open-loop, sdre or p-update)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::OpenLoop => "open-loop",
            Mode::Sdre => "sdre",
            Mode::PUpdate => "p-update",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Euclid,
    Mass,
}

/// Weight matrix given as a scalar multiple of the identity, an inline
/// matrix, `"output"` for `CᵀC`, or a path to a CSV matrix file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum WeightSpec {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum StateSpec {
    Inline(Vec<f64>),
    Named(String),
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub t_max: Option<f64>,
    pub max_step: Option<f64>,
    pub escape_norm: Option<f64>,
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    pub radius: Option<f64>,
    /// Explicit `[radius, count]` rings; overrides `radius`.
    pub rings: Option<Vec<(f64, usize)>>,
    pub horizon: Option<f64>,
    pub rho: Option<f64>,
    pub rho_scan: Option<bool>,
    pub omega: Option<f64>,
    pub quadrature_grid: Option<usize>,
    pub eval_points: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    pub epsilons: Option<Vec<f64>>,
    pub sizes: Option<Vec<usize>>,
}

/// Contents of a TOML experiment file. Every field is optional; missing
/// values fall back to the model preset.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Option<String>,
    pub mode: Option<Mode>,
    pub epsilon: Option<f64>,
    pub alpha: Option<f64>,
    pub elements: Option<usize>,
    pub q: Option<WeightSpec>,
    pub r: Option<WeightSpec>,
    pub x0: Option<StateSpec>,
    pub norm: Option<NormKind>,
    pub update_norm: Option<String>,
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub integrator: IntegratorSection,
    #[serde(default)]
    pub certify: CertifySection,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, BenchError> {
        toml::from_str(text).map_err(|e| {
            let (line, col) = e.span().map(|s| line_col(text, s.start)).unwrap_or((0, 0));
            BenchError::Parse { line, col, message: e.message().to_string() }
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::Config(format!("config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

/// 1-based line and column of a byte offset.
pub(crate) fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

/// Which built-in or file model an experiment refers to.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Banks5d,
    Chaffee { elements: usize },
    Oscillator { alpha: f64 },
    File(PathBuf),
}

/// A fully resolved experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub kind: ModelKind,
    pub model: SdcModel,
    pub mode: Mode,
    pub epsilon: Option<f64>,
    pub q: DenseMatrix,
    pub r: DenseMatrix,
    pub x0: StateVector,
    pub norm: NormKind,
    pub options: ControllerOptions,
    pub integrator: IntegratorConfig,
    pub output: PathBuf,
    pub seed: u64,
    pub certify: CertifySection,
    pub benchmark: BenchmarkSection,
}

impl Experiment {
    pub fn resolve(cfg: &ExperimentConfig) -> Result<Experiment, BenchError> {
        let name = cfg.model.clone().unwrap_or_else(|| "banks5d".into());
        let kind = match name.as_str() {
            "banks5d" => ModelKind::Banks5d,
            "chaffee" => ModelKind::Chaffee { elements: cfg.elements.unwrap_or(20) },
            "oscillator" => ModelKind::Oscillator { alpha: cfg.alpha.unwrap_or(0.4) },
            path if path.ends_with(".toml") => ModelKind::File(PathBuf::from(path)),
            other => return Err(BenchError::ModelUnknown(other.to_string())),
        };
        let model = build_model(&kind)?;
        let mode = cfg.mode.unwrap_or(if model.p == 0 { Mode::OpenLoop } else { Mode::Sdre });
        if mode != Mode::OpenLoop && model.p == 0 {
            return Err(BenchError::Config(format!("mode: {} needs a model with inputs", mode.as_str())));
        }
        let epsilon = match (mode, cfg.epsilon) {
            (Mode::PUpdate, Some(e)) if e > 0.0 && e < 1.0 => Some(e),
            (Mode::PUpdate, Some(e)) => return Err(BenchError::Config(format!("epsilon: {e} is outside (0, 1)"))),
            (Mode::PUpdate, None) => return Err(BenchError::Config("epsilon: required for p-update".into())),
            (_, e) => e,
        };

        let (default_q, default_r, default_x0, default_tmax) = match &kind {
            ModelKind::Banks5d => (WeightSpec::Named("output".into()), WeightSpec::Scalar(1e-3), banks5d_x0(), 3.0),
            ModelKind::Chaffee { elements } => (WeightSpec::Named("output".into()), WeightSpec::Scalar(0.1), chaffee_x0(*elements), 3.0),
            ModelKind::Oscillator { .. } => (WeightSpec::Scalar(1.0), WeightSpec::Scalar(1.0), StateVector::from_vec(vec![0.25, 0.0]), 10.0),
            ModelKind::File(_) => (WeightSpec::Named("output".into()), WeightSpec::Scalar(1.0), StateVector::zeros(model.n), 3.0),
        };
        let q = weight(cfg.q.as_ref().unwrap_or(&default_q), model.n, &model, "q")?;
        let r = weight(cfg.r.as_ref().unwrap_or(&default_r), model.p, &model, "r")?;
        let x0 = match &cfg.x0 {
            None => default_x0,
            Some(StateSpec::Named(s)) if s == "preset" => default_x0,
            Some(StateSpec::Named(s)) if s == "zero" => StateVector::zeros(model.n),
            Some(StateSpec::Named(s)) => return Err(BenchError::Config(format!("x0: unknown preset '{s}'"))),
            Some(StateSpec::Inline(v)) => {
                if v.len() != model.n {
                    return Err(BenchError::Config(format!("x0: has {} entries, model has {} states", v.len(), model.n)));
                }
                StateVector::from_vec(v.clone())
            }
        };

        let norm = cfg.norm.unwrap_or(NormKind::Euclid);
        if norm == NormKind::Mass && model.mass_matrix.is_none() {
            return Err(BenchError::Config("norm: mass norm requires a finite element model".into()));
        }
        let mut options = ControllerOptions::default();
        if let Some(u) = &cfg.update_norm {
            options.norm = match u.as_str() {
                "spectral" => UpdateNorm::Spectral,
                "frobenius" => UpdateNorm::Frobenius,
                other => return Err(BenchError::Config(format!("update_norm: unknown value '{other}'"))),
            };
        }

        let s = &cfg.integrator;
        let (rtol, atol) = match kind {
            ModelKind::Oscillator { .. } => (1e-8, 1e-10),
            _ => (1e-6, 1e-6),
        };
        let mut integrator = IntegratorConfig::new(s.rtol.unwrap_or(rtol), s.atol.unwrap_or(atol), s.t_max.unwrap_or(default_tmax));
        if let Some(h) = s.max_step {
            integrator.max_step = h;
        }
        if let Some(e) = s.escape_norm {
            integrator.escape_norm = e;
        }
        if let Some(m) = s.max_steps {
            integrator.max_steps = m;
        }
        if let ModelKind::Chaffee { elements } = kind {
            // tolerances are scaled with the inverse element length
            integrator.tol_scaling = elements as f64 / 2.0;
        }
        integrator.validate().map_err(|e| BenchError::Config(format!("integrator: {e}")))?;

        let output = cfg
            .output
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Ok(Experiment {
            kind,
            model,
            mode,
            epsilon,
            q,
            r,
            x0,
            norm,
            options,
            integrator,
            output,
            seed: cfg.seed.unwrap_or(0),
            certify: cfg.certify.clone(),
            benchmark: cfg.benchmark.clone(),
        })
    }

    pub fn control_mode(&self) -> Option<ControlMode> {
        match self.mode {
            Mode::OpenLoop => None,
            Mode::Sdre => Some(ControlMode::Sdre),
            Mode::PUpdate => Some(ControlMode::PUpdate),
        }
    }
}

pub fn build_model(kind: &ModelKind) -> Result<SdcModel, BenchError> {
    Ok(match kind {
        ModelKind::Banks5d => banks5d_model(),
        ModelKind::Chaffee { elements } => chaffee_infante_model(*elements).map_err(|e| BenchError::Config(format!("N: {e}")))?,
        ModelKind::Oscillator { alpha } => oscillator_model(*alpha).map_err(|e| BenchError::Config(format!("alpha: {e}")))?,
        ModelKind::File(path) => load_model_file(path)?,
    })
}

fn weight(spec: &WeightSpec, dim: usize, model: &SdcModel, field: &str) -> Result<DenseMatrix, BenchError> {
    let m = match spec {
        WeightSpec::Scalar(s) => DenseMatrix::identity(dim, dim) * *s,
        WeightSpec::Named(s) if s == "output" && field == "q" => model.output_weight(),
        WeightSpec::Named(path) => read_matrix_csv(Path::new(path)).map_err(|e| BenchError::Config(format!("{field}: {e}")))?,
        WeightSpec::Matrix(rows) => rows_to_matrix(rows).map_err(|e| BenchError::Config(format!("{field}: {e}")))?,
    };
    if m.nrows() != dim || m.ncols() != dim {
        return Err(BenchError::Config(format!("{field}: expected {dim}x{dim}, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(m)
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DenseMatrix, String> {
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != cols) {
        return Err("rows have different lengths".into());
    }
    Ok(DenseMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Reads a headerless comma-separated matrix.
pub fn read_matrix_csv(path: &Path) -> Result<DenseMatrix, String> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let row: Result<Vec<f64>, _> = rec.iter().map(|s| s.parse::<f64>()).collect();
        rows.push(row.map_err(|e| format!("{}: {e}", path.display()))?);
    }
    rows_to_matrix(&rows)
}
