use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sdc_stab::bench::{self, records::render_benchmark_table, BenchError, ExperimentConfig, Mode, NormKind};

#[derive(Parser)]
#[command(name = "sdcstab", version, about = "SDRE and p-update feedback experiments with decay certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one open- or closed-loop run.
    Simulate(Opts),
    /// Evaluate the decay certificate of an initial-value ensemble.
    Certify(Opts),
    /// Tabulate switches, evaluations and timings over ε (and N).
    Benchmark(Opts),
}

#[derive(Args, Debug)]
struct Opts {
    /// TOML experiment file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// banks5d, chaffee, oscillator, or a model file ending in .toml
    #[arg(long)]
    model: Option<String>,
    /// open-loop, sdre or p-update
    #[arg(long)]
    mode: Option<String>,
    /// Update threshold; a comma-separated list for benchmark.
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Outer radius of the initial-value grid.
    #[arg(long)]
    radius: Option<f64>,
    /// Number of finite elements; a comma-separated list for benchmark.
    #[arg(long = "N", value_delimiter = ',')]
    elements: Vec<usize>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    atol: Option<f64>,
    #[arg(long)]
    tmax: Option<f64>,
    /// Output directory (default: $SDCSTAB_OUT, then ./sdcstab-out).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// euclid or mass
    #[arg(long)]
    norm: Option<String>,
    /// Minimize m_t over ρ/t ∈ {0.1, …, 0.9} instead of ρ = 0.55t.
    #[arg(long)]
    rho_scan: bool,
}

fn build_config(opts: &Opts, benchmark: bool) -> Result<ExperimentConfig, BenchError> {
    let mut cfg = match &opts.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = &opts.model {
        cfg.model = Some(m.clone());
    }
    if let Some(m) = &opts.mode {
        cfg.mode = Some(Mode::parse(m)?);
    }
    if benchmark {
        if !opts.eps.is_empty() {
            cfg.benchmark.epsilons = Some(opts.eps.clone());
        }
        if !opts.elements.is_empty() {
            cfg.benchmark.sizes = Some(opts.elements.clone());
        }
    } else {
        match opts.eps.as_slice() {
            [] => {}
            [e] => cfg.epsilon = Some(*e),
            _ => return Err(BenchError::Config("eps: only benchmark accepts a list".into())),
        }
        match opts.elements.as_slice() {
            [] => {}
            [n] => cfg.elements = Some(*n),
            _ => return Err(BenchError::Config("N: only benchmark accepts a list".into())),
        }
    }
    if let Some(a) = opts.alpha {
        cfg.alpha = Some(a);
    }
    if let Some(r) = opts.radius {
        cfg.certify.radius = Some(r);
    }
    if let Some(v) = opts.rtol {
        cfg.integrator.rtol = Some(v);
    }
    if let Some(v) = opts.atol {
        cfg.integrator.atol = Some(v);
    }
    if let Some(v) = opts.tmax {
        cfg.integrator.t_max = Some(v);
    }
    if let Some(o) = &opts.out {
        cfg.output = Some(o.clone());
    }
    if let Some(s) = opts.seed {
        cfg.seed = Some(s);
    }
    if let Some(n) = &opts.norm {
        cfg.norm = Some(match n.as_str() {
            "euclid" => NormKind::Euclid,
            "mass" => NormKind::Mass,
            other => return Err(BenchError::Config(format!("norm: unknown value '{other}' (expected euclid or mass)"))),
        });
    }
    if opts.rho_scan {
        cfg.certify.rho_scan = Some(true);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<i32, BenchError> {
    match cli.command {
        Command::Simulate(opts) => {
            let s = bench::cmd_simulate(&build_config(&opts, false)?)?;
            println!(
                "{} {}: terminated={} t={} |x|={:.3e} f_evals={} fb_switches={} wall={:.3}s",
                s.model, s.mode, s.terminated, s.final_time, s.final_norm, s.f_evals, s.fb_switches, s.wall_time
            );
            Ok(0)
        }
        Command::Certify(opts) => {
            let s = bench::cmd_certify(&build_config(&opts, false)?)?;
            match s.t_star {
                Some(t) => println!("{}: {} (tStar = {t}, omega = {:.6}, K = {:.6})", s.model, s.verdict, s.omega, s.k),
                None => println!("{}: {} (omega = {:.6}, K = {:.6})", s.model, s.verdict, s.omega, s.k),
            }
            if let Some(w) = &s.witness {
                println!("witness: member {} {} at t = {} with |x| = {:.3e}", w.member, w.kind, w.time, w.norm);
            }
            Ok(0)
        }
        Command::Benchmark(opts) => {
            let rows = bench::cmd_benchmark(&build_config(&opts, true)?)?;
            print!("{}", render_benchmark_table(&rows));
            Ok(if rows.iter().all(|r| r.error.is_none()) { 0 } else { 2 })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("sdcstab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
