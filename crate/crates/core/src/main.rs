use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use membrane_lab::field::{sampler_for, write_snapshot};
use membrane_lab::green::{
    box_center, estimate_sD, fit_gamma_values, green_solver, solve_green_column, ContinuumDomain, DEFAULT_THETA,
};
use membrane_lab::harness::config::{ExperimentConfig, ExperimentKind};
use membrane_lab::harness::experiments::run;
use membrane_lab::harness::results::{format_f64, meta_path, persist, to_json_string, Format, ResultSet, Value};
use membrane_lab::harness::split_stream;
use membrane_lab::harness::verify::{run_tier, Tier};
use membrane_lab::lattice::{bilaplacian_stencil, make_box};
use membrane_lab::solver::SolverOptions;
use membrane_lab::{LabError, Result};

/// Membrane-model (discrete bilaplacian field) experiments and checks.
#[derive(Parser)]
#[command(name = "membrane-lab", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the Δ² stencil coefficients.
    Stencil(Common),
    /// Green's function column at the box center: rows (N, x, y, G, residual).
    Green(Common),
    /// G(center, center) against ln N with the fitted slope.
    GammaFit(Common),
    /// Draw field samples on box(dim, N).
    Sample(Common),
    /// Gibbs–Markov, conditional-mean and basis-sampler checks.
    GmVerify(Common),
    /// Level-set sizes |Γ_N(0)| across N.
    LevelsetCensus(Common),
    /// Overshoot rate and level ratios above a_N.
    TailFit(Common),
    /// Total masses of the dyadic measures Y_1..Y_m.
    GmcYm(Common),
    /// Total masses of the spectral chaos measure.
    GmcSpectral(Common),
    /// Y_1 against the reweighted spectral measure.
    GmcCompare(Common),
    /// Run an acceptance tier.
    Verify {
        /// exact | statistical | all
        #[arg(long, default_value = "exact")]
        tier: Tier,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Lattice dimension.
    #[arg(long, default_value_t = 4)]
    dim: usize,
    /// Box side(s) N, comma separated.
    #[arg(long, value_delimiter = ',')]
    size: Vec<i64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    replicas: Option<usize>,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Solver tolerance (dense and iterative).
    #[arg(long)]
    tol: Option<f64>,
    /// Truncation constant M; adds truncated counts to tail-fit output.
    #[arg(long = "truncation-M")]
    truncation_m: Option<f64>,
    /// Dyadic depth m.
    #[arg(long = "depth-m")]
    depth_m: Option<u32>,
    /// Spectral mode count (default: all).
    #[arg(long)]
    modes: Option<usize>,
    /// Output file; CSV output gets a `.meta.json` sidecar.
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv | json
    #[arg(long, default_value = "csv")]
    format: Format,
    /// Largest domain solved by dense factorization.
    #[arg(long = "max-dense")]
    max_dense: Option<usize>,
    /// Interior margin ε.
    #[arg(long)]
    margin: Option<f64>,
}

impl Common {
    fn solver(&self) -> Result<SolverOptions> {
        let mut s = SolverOptions::default();
        if let Some(t) = self.tol {
            if !(t > 0.0) {
                return Err(LabError::InvalidParameter(format!("tol = {t} must be positive")));
            }
            s = s.with_tol(t);
        }
        if let Some(m) = self.max_dense {
            s.max_dense = m;
        }
        Ok(s)
    }

    fn config(&self, kind: ExperimentKind) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::new(kind);
        c.dim = self.dim;
        if !self.size.is_empty() {
            c.sizes = self.size.clone();
        }
        c.lambda = self.lambda.unwrap_or(c.lambda);
        c.replicas = self.replicas.unwrap_or(c.replicas);
        c.truncation_m = self.truncation_m;
        c.depth_m = self.depth_m.unwrap_or(c.depth_m);
        c.modes = self.modes;
        c.master_seed = self.seed;
        c.solver = self.solver()?;
        c.margin = self.margin;
        c.out = self.out.clone();
        c.validate()?;
        Ok(c)
    }

    fn sizes_or(&self, default: i64) -> Result<Vec<i64>> {
        let sizes = if self.size.is_empty() { vec![default] } else { self.size.clone() };
        if self.dim == 0 || sizes.iter().any(|&n| n < 2) {
            return Err(LabError::InvalidParameter(format!("dim {} and sizes {sizes:?} must be positive, N ≥ 2", self.dim)));
        }
        Ok(sizes)
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) ends output quietly.
fn stdout(s: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(s.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

/// Writes records and summaries: to `--out` (plus sidecar for CSV) or to
/// stdout, with the CSV summary JSON going to stderr.
fn emit(rs: &ResultSet, common: &Common) -> Result<()> {
    match (&common.out, common.format) {
        (Some(path), f) => {
            persist(rs, path, f)?;
            stdout(&format!("{}\n", to_json_string(&rs.summaries)?))?;
        }
        (None, Format::Json) => stdout(&format!("{}\n", rs.to_json()?))?,
        (None, Format::Csv) => {
            stdout(&rs.records_csv()?)?;
            eprintln!("{}", to_json_string(&rs.summaries)?);
        }
    }
    Ok(())
}

/// Writes a CSV table (with a JSON side document) as `emit` does.
fn emit_table(header: &[String], rows: &[Vec<String>], side: &serde_json::Value, common: &Common) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::Io(e.into_error()))?;
    let side = to_json_string(side)?;
    match &common.out {
        Some(path) => {
            std::fs::write(path, &bytes)?;
            std::fs::write(meta_path(path), &side)?;
        }
        None => {
            stdout(std::str::from_utf8(&bytes).expect("csv output is utf-8"))?;
            eprintln!("{side}");
        }
    }
    Ok(())
}

fn emit_json(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let s = to_json_string(value)?;
    match out {
        Some(p) => std::fs::write(p, s)?,
        None => stdout(&format!("{s}\n"))?,
    }
    Ok(())
}

fn stencil(c: &Common) -> Result<()> {
    if c.dim == 0 {
        return Err(LabError::InvalidParameter("dim must be positive".into()));
    }
    let s = bilaplacian_stencil(c.dim);
    if c.format == Format::Json {
        let entries: Vec<_> = s
            .entries
            .iter()
            .map(|(o, q)| json!({"offset": o, "exact": q.to_string(), "value": *q.numer() as f64 / *q.denom() as f64}))
            .collect();
        return emit_json(&json!({"dim": c.dim, "entries": entries, "sum": s.sum().to_string()}), c.out.as_deref());
    }
    let mut header: Vec<String> = (1..=c.dim).map(|a| format!("o{a}")).collect();
    header.extend(["exact".into(), "value".into()]);
    let rows: Vec<Vec<String>> = s
        .entries
        .iter()
        .map(|(o, q)| {
            let mut r: Vec<String> = o.iter().map(i64::to_string).collect();
            r.push(q.to_string());
            r.push(format_f64(*q.numer() as f64 / *q.denom() as f64));
            r
        })
        .collect();
    emit_table(&header, &rows, &json!({"dim": c.dim, "sum": s.sum().to_string()}), c)
}

fn green(c: &Common) -> Result<()> {
    let sizes = c.sizes_or(10)?;
    let opts = c.solver()?;
    let mut header = vec!["N".to_string()];
    header.extend((1..=c.dim).map(|a| format!("x{a}")));
    header.extend((1..=c.dim).map(|a| format!("y{a}")));
    header.extend(["G".into(), "residual".into()]);
    let (mut rows, mut centers, mut s_d) = (Vec::new(), Vec::new(), Vec::new());
    for &n in &sizes {
        let y = box_center(c.dim, n);
        let solver = green_solver(Arc::new(make_box(c.dim, n)?), &opts)?;
        let col = solve_green_column(&solver, &y)?;
        for (x, g) in solver.operator().domain().points().zip(&col.values) {
            let mut r = vec![n.to_string()];
            r.extend(x.iter().chain(&y).map(i64::to_string));
            r.push(format_f64(*g));
            r.push(format_f64(col.residual));
            rows.push(r);
        }
        centers.push(col.values[col.source_index]);
        s_d.push(if c.dim == 4 {
            match estimate_sD(&ContinuumDomain::unit(4), n, &[0.5; 4], DEFAULT_THETA, &opts) {
                Ok(v) => Some(v),
                Err(LabError::Precondition(_)) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        });
    }
    let fit = if sizes.len() >= 3 { Some(fit_gamma_values(&sizes, &centers)?) } else { None };
    let side = json!({
        "gamma_hat": fit.as_ref().map(|f| f.slope),
        "stderr": fit.as_ref().map(|f| f.stderr),
        "sD": s_d,
    });
    emit_table(&header, &rows, &side, c)
}

fn sample(c: &Common) -> Result<()> {
    let n = c.sizes_or(8)?[0];
    let replicas = c.replicas.unwrap_or(1).max(1);
    let sampler = sampler_for(Arc::new(make_box(c.dim, n)?), &c.solver()?)?;
    let mut header = vec!["replica".to_string()];
    header.extend((1..=c.dim).map(|a| format!("x{a}")));
    header.push("h".into());
    let mut rows = Vec::new();
    for r in 0..replicas {
        let h = sampler.sample(&mut split_stream(c.seed, "sample", r as u64, "field"))?;
        if let Some(out) = &c.out {
            let mut p = out.as_os_str().to_owned();
            p.push(format!(".r{r}"));
            write_snapshot(&h, Path::new(&p))?;
            continue;
        }
        for (x, v) in h.domain.points().zip(&h.values) {
            let mut row = vec![r.to_string()];
            row.extend(x.iter().map(i64::to_string));
            row.push(format_f64(*v));
            rows.push(row);
        }
    }
    if c.out.is_none() {
        emit_table(&header, &rows, &json!({"N": n, "replicas": replicas, "seed": c.seed}), c)?;
    }
    Ok(())
}

/// Runs one subcommand and maps its outcome to an exit code.
fn dispatch(cmd: &Cmd) -> Result<u8> {
    let experiment = |c: &Common, kind| -> Result<ResultSet> {
        let rs = run(&c.config(kind)?)?;
        emit(&rs, c)?;
        Ok(rs)
    };
    match cmd {
        Cmd::Stencil(c) => stencil(c)?,
        Cmd::Green(c) => green(c)?,
        Cmd::Sample(c) => sample(c)?,
        Cmd::GammaFit(c) => drop(experiment(c, ExperimentKind::GammaFit)?),
        Cmd::LevelsetCensus(c) => drop(experiment(c, ExperimentKind::Census)?),
        Cmd::TailFit(c) => drop(experiment(c, ExperimentKind::Tail)?),
        Cmd::GmcYm(c) => drop(experiment(c, ExperimentKind::GmcYm)?),
        Cmd::GmcSpectral(c) => drop(experiment(c, ExperimentKind::GmcSpectral)?),
        Cmd::GmcCompare(c) => drop(experiment(c, ExperimentKind::Compare)?),
        Cmd::GmVerify(c) => {
            let rs = experiment(c, ExperimentKind::GmVerify)?;
            let failed: Vec<String> = rs
                .records
                .iter()
                .filter(|r| r.f64("passed") == Some(0.0))
                .map(|r| {
                    let text = |k| match r.get(k) {
                        Some(Value::Text(t)) => t.clone(),
                        _ => String::new(),
                    };
                    format!("{} ({})", text("check"), text("quantity"))
                })
                .collect();
            if !failed.is_empty() {
                eprintln!("failed checks: {}", failed.join(", "));
                return Ok(1);
            }
        }
        Cmd::Verify { tier, common } => {
            let checks = run_tier(*tier, common.seed, &common.solver()?)?;
            for chk in &checks {
                eprintln!("{}", chk.line());
            }
            let passed = checks.iter().all(|c| c.passed);
            emit_json(&json!({"tier": tier, "seed": common.seed, "passed": passed, "checks": checks}), common.out.as_deref())?;
            if !passed {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_solver_failure() { 3 } else { 2 })
        }
    }
}
