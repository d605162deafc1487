//! Declarative SDC models: polynomial entries of `A(x)` plus dense `B`, `C`.
//!
//! ```toml
//! name = "oscillator"
//! n = 2
//! p = 0
//! q = 0
//!
//! [[entry]]
//! row = 1
//! col = 2
//! poly = "-1 - x1^2"
//! ```
//!
//! Rows, columns and state indices are 1-based. `B` and `C` are arrays of
//! rows and may be omitted when `p` or `q` is zero.

use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;
use toml::Spanned;

use super::config::{line_col, rows_to_matrix};
use super::BenchError;
use crate::matkit::{DenseMatrix, StateVector};
use crate::model::SdcModel;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: Option<String>,
    n: usize,
    p: usize,
    q: usize,
    #[serde(rename = "B", default)]
    b: Vec<Vec<f64>>,
    #[serde(rename = "C", default)]
    c: Vec<Vec<f64>>,
    #[serde(default)]
    entry: Vec<RawEntry>,
    lipschitz: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    row: usize,
    col: usize,
    poly: Spanned<String>,
}

/// `coeff · Π x_i^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coeff: f64,
    /// 0-based state index and power.
    pub powers: Vec<(usize, u32)>,
}

impl Monomial {
    fn eval(&self, x: &StateVector) -> f64 {
        self.powers.iter().fold(self.coeff, |acc, &(i, k)| acc * x[i].powi(k as i32))
    }
}

/// Parses a sum of monomials such as `-2.5*x1*x3^2 + 4 - x2`. Errors
/// carry the 0-based character offset.
pub fn parse_polynomial(src: &str) -> Result<Vec<Monomial>, (usize, String)> {
    let chars: Vec<char> = src.chars().collect();
    let mut pos = 0;
    let mut terms = Vec::new();
    let skip_ws = |pos: &mut usize| {
        while *pos < chars.len() && chars[*pos].is_whitespace() {
            *pos += 1;
        }
    };
    skip_ws(&mut pos);
    if pos == chars.len() {
        return Ok(terms);
    }
    let mut first = true;
    loop {
        skip_ws(&mut pos);
        let mut sign = 1.0;
        if pos < chars.len() && (chars[pos] == '+' || chars[pos] == '-') {
            if chars[pos] == '-' {
                sign = -1.0;
            }
            pos += 1;
            skip_ws(&mut pos);
        } else if !first {
            return Err((pos, "expected '+' or '-'".into()));
        }
        first = false;
        let mut mono = Monomial { coeff: sign, powers: Vec::new() };
        loop {
            skip_ws(&mut pos);
            let start = pos;
            match chars.get(pos) {
                Some(c) if c.is_ascii_digit() || *c == '.' => {
                    while pos < chars.len() && (chars[pos].is_ascii_alphanumeric() || chars[pos] == '.' || ((chars[pos] == '-' || chars[pos] == '+') && matches!(chars[pos - 1], 'e' | 'E'))) {
                        pos += 1;
                    }
                    let text: String = chars[start..pos].iter().collect();
                    let v: f64 = text.parse().map_err(|_| (start, format!("bad number '{text}'")))?;
                    mono.coeff *= v;
                }
                Some('x') => {
                    pos += 1;
                    if chars.get(pos) == Some(&'_') {
                        pos += 1;
                    }
                    let ds = pos;
                    while pos < chars.len() && chars[pos].is_ascii_digit() {
                        pos += 1;
                    }
                    let idx: usize = chars[ds..pos].iter().collect::<String>().parse().map_err(|_| (start, "expected state index after 'x'".to_string()))?;
                    if idx == 0 {
                        return Err((start, "state indices start at 1".into()));
                    }
                    let mut power = 1u32;
                    skip_ws(&mut pos);
                    if chars.get(pos) == Some(&'^') {
                        pos += 1;
                        skip_ws(&mut pos);
                        let ps = pos;
                        while pos < chars.len() && chars[pos].is_ascii_digit() {
                            pos += 1;
                        }
                        power = chars[ps..pos].iter().collect::<String>().parse().map_err(|_| (ps, "expected integer exponent".to_string()))?;
                    }
                    mono.powers.push((idx - 1, power));
                }
                Some(c) => return Err((pos, format!("unexpected '{c}'"))),
                None => return Err((pos, "unexpected end of expression".into())),
            }
            skip_ws(&mut pos);
            if chars.get(pos) == Some(&'*') {
                pos += 1;
            } else {
                break;
            }
        }
        terms.push(mono);
        skip_ws(&mut pos);
        if pos == chars.len() {
            return Ok(terms);
        }
    }
}

/// Loads a model file.
pub fn load_model_file(path: &Path) -> Result<SdcModel, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::Config(format!("model file {}: {e}", path.display())))?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    parse_model_str(&text, &stem)
}

/// Parses model-file text; `default_name` is used when the file has no
/// `name` key.
pub fn parse_model_str(text: &str, default_name: &str) -> Result<SdcModel, BenchError> {
    let raw: RawModel = toml::from_str(text).map_err(|e| {
        let (line, col) = e.span().map(|s| line_col(text, s.start)).unwrap_or((0, 0));
        BenchError::Parse { line, col, message: e.message().to_string() }
    })?;
    let n = raw.n;
    if n == 0 {
        return Err(BenchError::DimensionMismatch("n must be positive".into()));
    }
    let mut entries: Vec<(usize, usize, Vec<Monomial>)> = Vec::new();
    for e in &raw.entry {
        if e.row == 0 || e.row > n || e.col == 0 || e.col > n {
            return Err(BenchError::DimensionMismatch(format!("entry ({}, {}) outside a {n}x{n} matrix", e.row, e.col)));
        }
        // offset of the first character inside the quotes
        let base = e.poly.span().start + 1;
        let monos = parse_polynomial(e.poly.get_ref()).map_err(|(off, message)| {
            let byte = base + e.poly.get_ref().chars().take(off).map(char::len_utf8).sum::<usize>();
            let (line, col) = line_col(text, byte);
            BenchError::Parse { line, col, message }
        })?;
        if let Some((i, _)) = monos.iter().flat_map(|m| m.powers.iter()).find(|(i, _)| *i >= n) {
            return Err(BenchError::DimensionMismatch(format!("entry ({}, {}) references x{} in a {n}-state model", e.row, e.col, i + 1)));
        }
        entries.push((e.row - 1, e.col - 1, monos));
    }
    let b = if raw.p == 0 && raw.b.is_empty() { DenseMatrix::zeros(n, 0) } else { rows_to_matrix(&raw.b).map_err(BenchError::DimensionMismatch)? };
    let c = if raw.q == 0 && raw.c.is_empty() { DenseMatrix::zeros(0, n) } else { rows_to_matrix(&raw.c).map_err(BenchError::DimensionMismatch)? };
    if b.nrows() != n || b.ncols() != raw.p {
        return Err(BenchError::DimensionMismatch(format!("B is {}x{}, expected {n}x{}", b.nrows(), b.ncols(), raw.p)));
    }
    if c.nrows() != raw.q || c.ncols() != n {
        return Err(BenchError::DimensionMismatch(format!("C is {}x{}, expected {}x{n}", c.nrows(), c.ncols(), raw.q)));
    }
    let coefficient = Arc::new(move |x: &StateVector| {
        let mut a = DenseMatrix::zeros(n, n);
        for (i, j, monos) in &entries {
            a[(*i, *j)] += monos.iter().map(|m| m.eval(x)).sum::<f64>();
        }
        a
    });
    let mut model = SdcModel::new(raw.name.unwrap_or_else(|| default_name.to_string()), n, coefficient, b, c)
        .map_err(|e| BenchError::DimensionMismatch(e.to_string()))?;
    model.lipschitz_hint = raw.lipschitz;
    Ok(model)
}
