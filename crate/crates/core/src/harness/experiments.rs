//! `run(config)`: one entry point per experiment kind, each producing a
//! [`ResultSet`] whose summaries are recomputable from its records.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::config::{ExperimentConfig, ExperimentKind};
use super::results::{Record, ResultSet};
use super::rng::split_stream;
use super::stats::{fit_loglog, summarize, FitMode};
use super::try_par_replicas;
use super::verify;
use crate::error::{LabError, Result};
use crate::gmc::{
    build_ym, dyadic_tree, prepare_layers, spectral_basis, subcube_s, zlambda_mean,
    Comparison, GmcMeasure, SpectralGmc,
};
use crate::green::{box_center, green_solver, solve_green_column, ContinuumDomain, SField};
use crate::lattice::{make_box, DyadicCube, LatticeDomain};
use crate::levelset::{
    sample_level_stats, scaling_params, truncation_event, ReplicaLevelStats, DEFAULT_MARGIN,
};
use crate::solver::SolverOptions;

/// Default tail-fit region margin: the centered half-cube `[1/4, 3/4)^d`.
pub const TAIL_MARGIN: f64 = 0.25;

pub fn run(config: &ExperimentConfig) -> Result<ResultSet> {
    config.validate()?;
    let mut rs = ResultSet::new(config.clone());
    match config.kind {
        ExperimentKind::GammaFit => gamma_fit(config, &mut rs)?,
        ExperimentKind::GmVerify => gm_verify(config, &mut rs)?,
        ExperimentKind::Census => census(config, &mut rs)?,
        ExperimentKind::Tail => tail(config, &mut rs)?,
        ExperimentKind::GmcYm => gmc_ym(config, &mut rs)?,
        ExperimentKind::GmcSpectral => gmc_spectral(config, &mut rs)?,
        ExperimentKind::Compare => {
            let n = config.sizes[0];
            let (ym, spectral) = compare_masses(n, config.lambda, config.replicas, config.master_seed, "compare", &config.solver)?;
            for (r, (a, b)) in ym.iter().zip(&spectral).enumerate() {
                rs.records.push(Record::new().int("replica", r as i64).num("ym_mass", *a).num("spectral_mass", *b));
            }
            rs.summaries = compare_summaries(&rs.records, config.lambda)?;
        }
    }
    Ok(rs)
}

/// Recomputes the summaries of `rs` from its records alone.
pub fn recompute_summaries(rs: &ResultSet) -> Result<BTreeMap<String, f64>> {
    let c = &rs.config;
    match c.kind {
        ExperimentKind::GammaFit => gamma_summaries(&rs.records),
        ExperimentKind::GmVerify => Ok(check_summaries(&rs.records)),
        ExperimentKind::Census => census_summaries(&rs.records, c.lambda),
        ExperimentKind::Tail => {
            let params = scaling_params(c.lambda, c.sizes[0], None)?;
            let stats = tail_stats_from_records(&rs.records);
            tail_summaries(&stats, &params, &rs.records)
        }
        ExperimentKind::GmcYm => mass_summaries(&rs.records, c.depth_m, None),
        ExperimentKind::GmcSpectral => mass_summaries(&rs.records, 0, None),
        ExperimentKind::Compare => compare_summaries(&rs.records, c.lambda),
    }
}

fn gamma_fit(c: &ExperimentConfig, rs: &mut ResultSet) -> Result<()> {
    for &n in &c.sizes {
        let solver = green_solver(Arc::new(make_box(c.dim, n)?), &c.solver)?;
        let col = solve_green_column(&solver, &box_center(c.dim, n))?;
        rs.records.push(
            Record::new()
                .int("N", n)
                .num("G_center", col.values[col.source_index])
                .num("residual", col.residual)
                .int("iterations", col.iterations as i64),
        );
    }
    rs.summaries = gamma_summaries(&rs.records)?;
    Ok(())
}

fn column(records: &[Record], key: &str) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| r.f64(key).ok_or_else(|| LabError::InsufficientData(format!("record without {key}"))))
        .collect()
}

fn gamma_summaries(records: &[Record]) -> Result<BTreeMap<String, f64>> {
    let fit = fit_loglog(&column(records, "N")?, &column(records, "G_center")?, FitMode::SemiLog)?;
    Ok(BTreeMap::from([
        ("slope".into(), fit.slope),
        ("intercept".into(), fit.intercept),
        ("stderr".into(), fit.stderr),
    ]))
}

fn gm_verify(c: &ExperimentConfig, rs: &mut ResultSet) -> Result<()> {
    let outer = c.sizes[0];
    let inner = (outer / 2 + 1).max(3);
    let mut checks = vec![verify::gibbs_markov_check(outer, inner)?];
    checks.push(verify::criterion(5, c.master_seed, &c.solver)?);
    if (outer - 1).pow(c.dim as u32) as usize <= crate::field::MAX_BASIS_POINTS {
        checks.push(verify::basis_reconstruction_check(outer.min(6))?);
    }
    for chk in &checks {
        for (k, v) in &chk.values {
            rs.records.push(Record::new().text("check", &chk.name).text("quantity", k).num("value", *v).int("passed", chk.passed as i64));
        }
    }
    let v = Arc::new(make_box(c.dim, outer)?);
    let q = (outer - inner) / 2 + 1;
    let u = Arc::new(LatticeDomain::region(vec![q; c.dim], vec![q + inner - 2; c.dim])?);
    let z = verify::recombination_z(v, u, c.replicas, c.master_seed, &c.solver)?;
    rs.records.push(
        Record::new()
            .text("check", "Gibbs–Markov recombination")
            .text("quantity", "variance_z_score")
            .num("value", z)
            .int("passed", (z.abs() <= super::tolerances::TOLERANCES.se_band) as i64),
    );
    rs.summaries = check_summaries(&rs.records);
    Ok(())
}

fn check_summaries(records: &[Record]) -> BTreeMap<String, f64> {
    let failed = records.iter().filter(|r| r.f64("passed") == Some(0.0)).count();
    BTreeMap::from([("checks".into(), records.len() as f64), ("failed".into(), failed as f64)])
}

fn census(c: &ExperimentConfig, rs: &mut ResultSet) -> Result<()> {
    let margin = c.margin.or(Some(DEFAULT_MARGIN)).filter(|m| *m > 0.0);
    let report = crate::levelset::census_experiment(c.lambda, &c.sizes, c.replicas, c.master_seed, margin, &c.solver)?;
    for row in &report.rows {
        let mut r = Record::new().num("lambda", row.lambda).int("N", row.n).int("replica", row.replica as i64).int("count", row.count as i64);
        if let Some(m) = row.overshoot_mean {
            r = r.num("overshoot_mean", m);
        }
        rs.records.push(r);
    }
    rs.summaries = census_summaries(&rs.records, c.lambda)?;
    Ok(())
}

fn census_summaries(records: &[Record], lambda: f64) -> Result<BTreeMap<String, f64>> {
    let mut by_n: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for r in records {
        let n = r.f64("N").ok_or_else(|| LabError::InsufficientData("record without N".into()))? as i64;
        by_n.entry(n).or_default().push(r.f64("count").unwrap_or(0.0));
    }
    let mut out = BTreeMap::new();
    let (mut ns, mut means) = (Vec::new(), Vec::new());
    for (n, counts) in &by_n {
        let s = summarize(counts)?;
        out.insert(format!("mean_count_N{n}"), s.mean);
        out.insert(format!("stderr_count_N{n}"), s.stderr);
        ns.push(*n as f64);
        means.push(s.mean);
    }
    let fit = fit_loglog(&ns, &means, FitMode::LogLog)?;
    out.insert("slope".into(), fit.slope);
    out.insert("slope_stderr".into(), fit.stderr);
    out.insert("expected_slope".into(), 4.0 * (1.0 - lambda * lambda));
    Ok(out)
}

const TAIL_B: [f64; 3] = [0.0, 0.5, 1.0];

fn tail(c: &ExperimentConfig, rs: &mut ResultSet) -> Result<()> {
    let n = c.sizes[0];
    let params = scaling_params(c.lambda, n, None)?;
    let eps = c.margin.unwrap_or(TAIL_MARGIN);
    let (lo, hi) = (vec![eps; c.dim], vec![1.0 - eps; c.dim]);
    let stats = sample_level_stats(&params, c.replicas, c.master_seed, "tail", &TAIL_B, Some((&lo, &hi)), &c.solver)?;
    let truncated: Option<Vec<usize>> = match c.truncation_m {
        None => None,
        Some(m) => Some(truncated_counts(&params, c, m, &lo, &hi)?),
    };
    for s in &stats {
        let mut r = Record::new().int("replica", s.replica as i64);
        for (b, k) in TAIL_B.iter().zip(&s.counts) {
            r = r.int(&format!("count_b{b}"), *k as i64);
        }
        r = r.int("overshoots", s.overshoots.len() as i64);
        let w: Vec<f64> = s.overshoots.iter().copied().filter(|u| *u <= 1.0).collect();
        r = r.int("windowed", w.len() as i64).num("windowed_sum", w.iter().sum()).num("overshoot_sum", s.overshoots.iter().sum());
        if let Some(t) = &truncated {
            r = r.int("truncated_count", t[s.replica] as i64);
        }
        rs.records.push(r);
    }
    rs.summaries = tail_summaries(&stats, &params, &rs.records)?;
    Ok(())
}

/// `|Γ_N(0) ∩ A|` restricted to points where `T_{N,M}` holds.
fn truncated_counts(
    params: &crate::levelset::ScalingParams,
    c: &ExperimentConfig,
    m: f64,
    lo: &[f64],
    hi: &[f64],
) -> Result<Vec<usize>> {
    let dom = Arc::new(make_box(c.dim, params.n)?);
    let sampler = crate::field::sampler_for(dom, &c.solver)?;
    let n = params.n as f64;
    try_par_replicas(c.replicas, |r| {
        // the same stream as sample_level_stats, so the fields coincide
        let h = sampler.sample(&mut split_stream(c.master_seed, "tail", r as u64, "field"))?;
        let mut count = 0;
        for (p, v) in h.domain.points().zip(&h.values) {
            if *v >= params.a_n
                && crate::green::in_half_open(p, n, lo, hi)
                && truncation_event(&h, p, m, params, &c.solver)?.pass
            {
                count += 1;
            }
        }
        Ok(count)
    })
}

/// Rebuilds the pooled statistics the tail fit needs from stored records:
/// the windowed MLE only depends on the count and sum of windowed overshoots.
fn tail_stats_from_records(records: &[Record]) -> Vec<(usize, f64, Vec<f64>)> {
    records
        .iter()
        .map(|r| {
            let counts = TAIL_B.iter().map(|b| r.f64(&format!("count_b{b}")).unwrap_or(0.0)).collect();
            (r.f64("windowed").unwrap_or(0.0) as usize, r.f64("windowed_sum").unwrap_or(0.0), counts)
        })
        .collect()
}

fn tail_summaries<S: TailInput>(stats: &S, params: &crate::levelset::ScalingParams, records: &[Record]) -> Result<BTreeMap<String, f64>> {
    let (count, sum, per_b) = stats.pooled();
    let rate = windowed_rate(count, sum, 1.0)?;
    let mut out = BTreeMap::from([
        ("overshoot_rate".into(), rate.0),
        ("overshoot_rate_stderr".into(), rate.1),
        ("predicted_rate".into(), params.beta()),
        ("replicas".into(), records.len() as f64),
    ]);
    let base = per_b[0];
    for (b, m) in TAIL_B.iter().zip(&per_b) {
        out.insert(format!("mean_count_b{b}"), *m);
        out.insert(format!("ratio_b{b}"), m / base);
        out.insert(format!("predicted_ratio_b{b}"), (-params.beta() * b).exp());
    }
    if records.iter().any(|r| r.get("truncated_count").is_some()) {
        let t = column(records, "truncated_count")?;
        out.insert("mean_truncated_count".into(), t.iter().sum::<f64>() / t.len() as f64);
    }
    Ok(out)
}

trait TailInput {
    /// `(windowed count, windowed sum, mean count per b)`.
    fn pooled(&self) -> (usize, f64, Vec<f64>);
}

impl TailInput for Vec<ReplicaLevelStats> {
    fn pooled(&self) -> (usize, f64, Vec<f64>) {
        let as_rows: Vec<(usize, f64, Vec<f64>)> = self
            .iter()
            .map(|s| {
                let w: Vec<f64> = s.overshoots.iter().copied().filter(|u| *u <= 1.0).collect();
                (w.len(), w.iter().sum(), s.counts.iter().map(|c| *c as f64).collect())
            })
            .collect();
        as_rows.pooled()
    }
}

impl TailInput for Vec<(usize, f64, Vec<f64>)> {
    fn pooled(&self) -> (usize, f64, Vec<f64>) {
        let count = self.iter().map(|r| r.0).sum();
        let sum = self.iter().map(|r| r.1).sum();
        let k = self.first().map_or(0, |r| r.2.len());
        let means = (0..k).map(|i| self.iter().map(|r| r.2[i]).sum::<f64>() / self.len() as f64).collect();
        (count, sum, means)
    }
}

/// Truncated-exponential MLE from sufficient statistics.
fn windowed_rate(count: usize, sum: f64, window: f64) -> Result<(f64, f64)> {
    if count == 0 {
        return Err(LabError::InsufficientData("no overshoots in the window".into()));
    }
    let mean = sum / count as f64;
    // the estimator depends on the sample only through its size and mean
    super::stats::truncated_exponential_rate_mle(&vec![mean; count], window)
}

fn gmc_ym(c: &ExperimentConfig, rs: &mut ResultSet) -> Result<()> {
    let n = c.sizes[0];
    let m = c.depth_m;
    let tree = dyadic_tree(0, m);
    let prep = prepare_layers(&tree, n, &c.solver)?;
    let s_tables = (1..=m).map(|j| subcube_s(&tree.truncated(j), n, &c.solver)).collect::<Result<Vec<_>>>()?;
    let masses: Vec<Vec<f64>> = try_par_replicas(c.replicas, |r| {
        let layers = prep.sample(&split_stream(c.master_seed, "gmc-ym", r as u64, "layers"))?;
        (1..=m)
            .map(|j| {
                let y = build_ym(&tree.truncated(j), &layers, &s_tables[j as usize - 1], c.lambda)?;
                if r == 0 && j == m {
                    if let Some(out) = &c.out {
                        y.write(&measure_path(out))?;
                    }
                }
                Ok(y.total_mass())
            })
            .collect()
    })?;
    for (r, ms) in masses.iter().enumerate() {
        let mut rec = Record::new().int("replica", r as i64);
        for (j, v) in ms.iter().enumerate() {
            rec = rec.num(&format!("mass_m{}", j + 1), *v);
        }
        rs.records.push(rec);
    }
    let s = SField::compute(&ContinuumDomain::unit(c.dim), n, &c.solver)?;
    let z = zlambda_mean(&ContinuumDomain::unit(c.dim), c.lambda, &s)?;
    rs.summaries = mass_summaries(&rs.records, m, Some(z))?;
    Ok(())
}

/// `<out>.measure.csv`: where a representative measure is written.
pub fn measure_path(out: &std::path::Path) -> std::path::PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".measure.csv");
    s.into()
}

/// Mean and stderr of `mass_m{j}` (or `mass` when `depth = 0`); keeps a
/// previously stored `zlambda_mean`.
fn mass_summaries(records: &[Record], depth: u32, z: Option<f64>) -> Result<BTreeMap<String, f64>> {
    let keys: Vec<String> = if depth == 0 { vec!["mass".into()] } else { (1..=depth).map(|j| format!("mass_m{j}")).collect() };
    let mut out = BTreeMap::new();
    for k in keys {
        let s = summarize(&column(records, &k)?)?;
        out.insert(format!("mean_{k}"), s.mean);
        out.insert(format!("stderr_{k}"), s.stderr);
    }
    if let Some(z) = z {
        out.insert("zlambda_mean".into(), z);
    }
    Ok(out)
}

fn gmc_spectral(c: &ExperimentConfig, rs: &mut ResultSet) -> Result<()> {
    let side = c.sizes[0];
    let beta = std::f64::consts::PI * c.lambda;
    let base = DyadicCube::unit(c.dim);
    let gmc = match c.modes {
        None => SpectralGmc::full(base, side, beta, &c.solver)?,
        Some(k) => {
            let basis = Arc::new(spectral_basis(Arc::new(make_box(c.dim, side)?))?);
            SpectralGmc::from_basis(basis, base, side, beta, k)?
        }
    };
    let masses: Vec<GmcMeasure> = try_par_replicas(c.replicas, |r| {
        gmc.sample(&mut split_stream(c.master_seed, "gmc-spectral", r as u64, "modes"))
    })?;
    if let (Some(out), Some(first)) = (&c.out, masses.first()) {
        first.write(&measure_path(out))?;
    }
    for (r, m) in masses.iter().enumerate() {
        rs.records.push(Record::new().int("replica", r as i64).num("mass", m.total_mass()));
    }
    rs.summaries = mass_summaries(&rs.records, 0, None)?;
    rs.summaries.insert("volume".into(), 1.0);
    rs.summaries.insert("mode_count".into(), gmc.mode_count() as f64);
    Ok(())
}

/// Total masses of `Y_1` and of the reweighted full-mode spectral measure
/// on `(0,1)^4` at resolution `n`.
pub fn compare_masses(
    n: i64,
    lambda: f64,
    replicas: usize,
    seed: u64,
    experiment: &str,
    opts: &SolverOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let tree = dyadic_tree(0, 1);
    let prep = prepare_layers(&tree, n, opts)?;
    let s1 = subcube_s(&tree, n, opts)?;
    let ym: Vec<f64> = try_par_replicas(replicas, |r| {
        let layers = prep.sample(&split_stream(seed, experiment, r as u64, "layers"))?;
        Ok(build_ym(&tree, &layers, &s1, lambda)?.total_mass())
    })?;
    let sd = SField::compute(&ContinuumDomain::unit(4), n, opts)?;
    let gmc = SpectralGmc::full(DyadicCube::unit(4), n, std::f64::consts::PI * lambda, opts)?;
    let spectral: Vec<f64> = try_par_replicas(replicas, |r| {
        let mut m = gmc.sample(&mut split_stream(seed, experiment, r as u64, "spectral"))?;
        m.reweight(&sd, lambda)?;
        Ok(m.total_mass())
    })?;
    Ok((ym, spectral))
}

/// The comparison statistics for criterion-style runs.
pub fn compare(n: i64, lambda: f64, replicas: usize, seed: u64, experiment: &str, opts: &SolverOptions) -> Result<Comparison> {
    let (ym, spectral) = compare_masses(n, lambda, replicas, seed, experiment, opts)?;
    comparison_from_masses(&ym, &spectral, lambda)
}

fn comparison_from_masses(ym: &[f64], spectral: &[f64], lambda: f64) -> Result<Comparison> {
    let (a, b) = (summarize(ym)?, summarize(spectral)?);
    let ratio = a.mean / b.mean;
    Ok(Comparison {
        lambda,
        ym: a,
        spectral: b,
        mean_ratio: ratio,
        ratio_stderr: ratio * ((a.stderr / a.mean).powi(2) + (b.stderr / b.mean).powi(2)).sqrt(),
        ks_statistic: super::stats::ks_statistic(ym, spectral),
    })
}

fn compare_summaries(records: &[Record], lambda: f64) -> Result<BTreeMap<String, f64>> {
    let c = comparison_from_masses(&column(records, "ym_mass")?, &column(records, "spectral_mass")?, lambda)?;
    Ok(BTreeMap::from([
        ("mean_ym".into(), c.ym.mean),
        ("stderr_ym".into(), c.ym.stderr),
        ("mean_spectral".into(), c.spectral.mean),
        ("stderr_spectral".into(), c.spectral.stderr),
        ("mean_ratio".into(), c.mean_ratio),
        ("ratio_stderr".into(), c.ratio_stderr),
        ("ks_statistic".into(), c.ks_statistic),
    ]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(kind);
        c.master_seed = 3;
        c
    }

    #[test]
    fn census_run_is_deterministic_and_coherent() {
        let mut c = small(ExperimentKind::Census);
        c.sizes = vec![6, 8, 10];
        c.replicas = 20;
        let a = run(&c).unwrap();
        let b = run(&c).unwrap();
        assert_eq!(a.records_csv().unwrap(), b.records_csv().unwrap());
        assert!(a.summary("slope").is_some());
        assert_eq!(recompute_summaries(&a).unwrap(), a.summaries);
    }

    #[test]
    fn first_replica_independent_of_replica_count() {
        let mut c = small(ExperimentKind::Tail);
        c.sizes = vec![8];
        c.lambda = 0.2;
        c.replicas = 1;
        let one = run(&c).unwrap();
        c.replicas = 2;
        let two = run(&c).unwrap();
        assert_eq!(one.records[0], two.records[0]);
        assert_eq!(recompute_summaries(&two).unwrap(), two.summaries);
    }

    #[test]
    fn worker_count_invariance() {
        let mut c = small(ExperimentKind::GmcSpectral);
        c.sizes = vec![5];
        c.modes = Some(20);
        c.replicas = 16;
        let a = super::super::with_threads(1, || run(&c).unwrap());
        let b = super::super::with_threads(3, || run(&c).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn gamma_fit_summaries_recompute() {
        let mut c = small(ExperimentKind::GammaFit);
        c.sizes = vec![4, 6, 8];
        let rs = run(&c).unwrap();
        assert_eq!(rs.records.len(), 3);
        assert_eq!(recompute_summaries(&rs).unwrap(), rs.summaries);
    }

    #[test]
    fn ym_and_compare_runs() {
        let mut c = small(ExperimentKind::GmcYm);
        c.sizes = vec![8];
        c.depth_m = 1;
        c.replicas = 8;
        let rs = run(&c).unwrap();
        assert!(rs.summary("zlambda_mean").unwrap() > 0.0);
        let mut c = small(ExperimentKind::Compare);
        c.sizes = vec![8];
        c.replicas = 8;
        let rs = run(&c).unwrap();
        assert_eq!(recompute_summaries(&rs).unwrap(), rs.summaries);
    }
}
