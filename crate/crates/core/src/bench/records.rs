//! CSV records and their writers/readers. Floats are written with 17
//! significant digits so that every value re-parses to the same `f64`.

use std::io::{Read, Write};

use super::BenchError;

pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

fn parse_f64(s: &str) -> Result<f64, BenchError> {
    s.parse::<f64>().map_err(|_| BenchError::Config(format!("bad float '{s}'")))
}

fn csv_err(e: csv::Error) -> BenchError {
    BenchError::Io(e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub norm_x: f64,
    pub switch_flag: bool,
}

pub fn write_trajectory_csv<W: Write>(w: W, rows: &[TrajectoryRow]) -> Result<(), BenchError> {
    let n = rows.first().map_or(0, |r| r.x.len());
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.push("norm_x".into());
    header.push("switch_flag".into());
    wtr.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![fmt_f64(r.t)];
        rec.extend(r.x.iter().map(|v| fmt_f64(*v)));
        rec.push(fmt_f64(r.norm_x));
        rec.push(if r.switch_flag { "1" } else { "0" }.into());
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| BenchError::Io(e.to_string()))
}

pub fn read_trajectory_csv<R: Read>(r: R) -> Result<Vec<TrajectoryRow>, BenchError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let k = rec.len();
        if k < 3 {
            return Err(BenchError::Config("trajectory row too short".into()));
        }
        let x: Result<Vec<f64>, _> = (1..k - 2).map(|i| parse_f64(&rec[i])).collect();
        out.push(TrajectoryRow { t: parse_f64(&rec[0])?, x: x?, norm_x: parse_f64(&rec[k - 2])?, switch_flag: &rec[k - 1] == "1" });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchRow {
    pub index: usize,
    pub t: f64,
    pub k: f64,
    pub omega: f64,
}

pub fn write_switches_csv<W: Write>(w: W, rows: &[SwitchRow]) -> Result<(), BenchError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["index", "t", "K", "omega"]).map_err(csv_err)?;
    for r in rows {
        wtr.write_record([r.index.to_string(), fmt_f64(r.t), fmt_f64(r.k), fmt_f64(r.omega)]).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| BenchError::Io(e.to_string()))
}

pub fn read_switches_csv<R: Read>(r: R) -> Result<Vec<SwitchRow>, BenchError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let index = rec[0].parse().map_err(|_| BenchError::Config(format!("bad index '{}'", &rec[0])))?;
        out.push(SwitchRow { index, t: parse_f64(&rec[1])?, k: parse_f64(&rec[2])?, omega: parse_f64(&rec[3])? });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateRow {
    pub t: f64,
    pub k: f64,
    pub m_t: f64,
    pub big_m_t: f64,
    pub minus_omega_star: f64,
}

pub fn write_certificate_csv<W: Write>(w: W, rows: &[CertificateRow]) -> Result<(), BenchError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["t", "K", "m_t", "M_t", "minus_omega_star"]).map_err(csv_err)?;
    for r in rows {
        wtr.write_record([fmt_f64(r.t), fmt_f64(r.k), fmt_f64(r.m_t), fmt_f64(r.big_m_t), fmt_f64(r.minus_omega_star)]).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| BenchError::Io(e.to_string()))
}

pub fn read_certificate_csv<R: Read>(r: R) -> Result<Vec<CertificateRow>, BenchError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        out.push(CertificateRow {
            t: parse_f64(&rec[0])?,
            k: parse_f64(&rec[1])?,
            m_t: parse_f64(&rec[2])?,
            big_m_t: parse_f64(&rec[3])?,
            minus_omega_star: parse_f64(&rec[4])?,
        });
    }
    Ok(out)
}

/// One benchmark row: a scheme at one `(ε, N)` combination.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub scheme: String,
    pub n: usize,
    pub epsilon: f64,
    /// Absent for the SDRE scheme, which never switches.
    pub fb_switches: Option<usize>,
    pub f_evals: usize,
    pub wall_time: f64,
    pub terminated: String,
    pub error: Option<String>,
}

const BENCH_HEADER: [&str; 8] = ["scheme", "N", "epsilon", "fb_switches", "f_evals", "wall_time_s", "terminated", "error"];

pub fn write_benchmark_csv<W: Write>(w: W, rows: &[BenchmarkRow]) -> Result<(), BenchError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(BENCH_HEADER).map_err(csv_err)?;
    for r in rows {
        wtr.write_record([
            r.scheme.clone(),
            r.n.to_string(),
            fmt_f64(r.epsilon),
            r.fb_switches.map(|s| s.to_string()).unwrap_or_default(),
            r.f_evals.to_string(),
            fmt_f64(r.wall_time),
            r.terminated.clone(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| BenchError::Io(e.to_string()))
}

pub fn read_benchmark_csv<R: Read>(r: R) -> Result<Vec<BenchmarkRow>, BenchError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    let int = |s: &str| s.parse::<usize>().map_err(|_| BenchError::Config(format!("bad integer '{s}'")));
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        out.push(BenchmarkRow {
            scheme: rec[0].to_string(),
            n: int(&rec[1])?,
            epsilon: parse_f64(&rec[2])?,
            fb_switches: if rec[3].is_empty() { None } else { Some(int(&rec[3])?) },
            f_evals: int(&rec[4])?,
            wall_time: parse_f64(&rec[5])?,
            terminated: rec[6].to_string(),
            error: if rec[7].is_empty() { None } else { Some(rec[7].to_string()) },
        });
    }
    Ok(out)
}

/// Aligned plain-text table of benchmark rows.
pub fn render_benchmark_table(rows: &[BenchmarkRow]) -> String {
    let mut cells: Vec<[String; 7]> = vec![["scheme", "N", "eps", "#fb-switches", "#f-eva", "comp-time", "status"].map(String::from)];
    for r in rows {
        cells.push([
            r.scheme.clone(),
            r.n.to_string(),
            format!("{}", r.epsilon),
            r.fb_switches.map_or_else(|| "---".into(), |s| s.to_string()),
            r.f_evals.to_string(),
            format!("{:.3}s", r.wall_time),
            r.error.as_ref().map_or_else(|| r.terminated.clone(), |e| format!("error: {e}")),
        ]);
    }
    let widths: Vec<usize> = (0..7).map(|j| cells.iter().map(|c| c[j].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, c) in cells.iter().enumerate() {
        let line: Vec<String> = (0..7)
            .map(|j| if j == 0 || j == 6 { format!("{:<w$}", c[j], w = widths[j]) } else { format!("{:>w$}", c[j], w = widths[j]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 12));
            out.push('\n');
        }
    }
    out
}
