//! Scaling sequences, intermediate level sets, the truncation event and the
//! level-set point measures, with the moment and tail estimators built on
//! them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::field::{coarse_field, sampler_for, FieldSample};
use crate::green::{in_half_open, SField, GAMMA};
use crate::harness::rng::split_stream;
use crate::harness::stats::{
    exponential_rate_mle, fit_loglog, summarize, truncated_exponential_rate_mle, FitMode, Summary,
};
use crate::harness::try_par_replicas;
use crate::lattice::{hierarchy, make_box, LatticePoint};
use crate::solver::SolverOptions;

/// Default interior margin `ε` for `D_N^ε`.
pub const DEFAULT_MARGIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub lambda: f64,
    pub n: i64,
    pub gamma: f64,
    pub a_n: f64,
    /// `K_N`.
    pub k_norm: f64,
    /// `k_N = ⌊ln K_N / 8⌋`.
    pub k_n: usize,
    pub epsilon_margin: Option<f64>,
}

/// `a_N = 2λ√(2γ) ln N = (8λ/π) ln N`.
pub fn canonical_level(lambda: f64, n: i64) -> f64 {
    2.0 * lambda * (2.0 * GAMMA).sqrt() * (n as f64).ln()
}

/// `a_N`, `K_N = N⁴/√(ln N)·exp(−a_N²/(2γ ln N))` and `k_N`.
pub fn scaling_params(lambda: f64, n: i64, a_override: Option<f64>) -> Result<ScalingParams> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(LabError::InvalidParameter(format!("lambda = {lambda} is not in (0, 1)")));
    }
    if n < 3 {
        return Err(LabError::InvalidParameter(format!("N = {n} < 3")));
    }
    let ln = (n as f64).ln();
    let a_n = a_override.unwrap_or_else(|| canonical_level(lambda, n));
    let k_norm = (n as f64).powi(4) / ln.sqrt() * (-a_n * a_n / (2.0 * GAMMA * ln)).exp();
    let k_n = (k_norm.ln() / 8.0).floor().max(0.0) as usize;
    Ok(ScalingParams { lambda, n, gamma: GAMMA, a_n, k_norm, k_n, epsilon_margin: None })
}

impl ScalingParams {
    pub fn with_margin(mut self, eps: f64) -> Self {
        self.epsilon_margin = Some(eps);
        self
    }

    /// `πλ`, the exponential rate of overshoots.
    pub fn beta(&self) -> f64 {
        std::f64::consts::PI * self.lambda
    }

    /// Whether `x ∈ D_N^ε` (always true without a margin).
    pub fn in_margin(&self, x: &[i64]) -> bool {
        match self.epsilon_margin {
            None => true,
            Some(eps) => {
                let n = self.n as f64;
                x.iter().all(|&c| {
                    let u = c as f64 / n;
                    u >= eps && u <= 1.0 - eps
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSet {
    pub b: f64,
    pub points: Vec<LatticePoint>,
}

/// `Γ_N(b) = {x : h(x) ≥ a_N + b}`.
pub fn extract_level_set(h: &FieldSample, params: &ScalingParams, b: f64) -> LevelSet {
    let t = params.a_n + b;
    let points = h
        .domain
        .points()
        .zip(&h.values)
        .filter(|(_, v)| **v >= t)
        .map(|(p, _)| LatticePoint(p.to_vec()))
        .collect();
    LevelSet { b, points }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationRecord {
    pub x: LatticePoint,
    pub m: f64,
    pub pass: bool,
    /// `(k, S_k(x))` for `k_N ≤ k ≤ n(x)`.
    pub path: Vec<(usize, f64)>,
    pub n_x: usize,
}

/// `|S_k − a_N (n − k)/n| ≤ M (n − k)^{3/4}` for every `(k, S_k)` on the path.
/// At `k = n` both sides vanish; with `n = 0` the interpolation is taken
/// as 0.
pub fn truncation_holds(path: &[(usize, f64)], n_x: usize, a_n: f64, m: f64) -> bool {
    path.iter().all(|&(k, s)| {
        let rem = (n_x - k) as f64;
        let line = if n_x == 0 { 0.0 } else { a_n * rem / n_x as f64 };
        (s - line).abs() <= m * rem.powf(0.75)
    })
}

/// The event `T_{N,M}(x)`; vacuous (empty path, pass) when `k_N > n(x)`.
pub fn truncation_event(
    h: &FieldSample,
    x: &[i64],
    m: f64,
    params: &ScalingParams,
    opts: &SolverOptions,
) -> Result<TruncationRecord> {
    let hier = hierarchy(&h.domain, x)?;
    let n_x = hier.n_x;
    if params.k_n > n_x {
        return Ok(TruncationRecord { x: LatticePoint(x.to_vec()), m, pass: true, path: vec![], n_x });
    }
    let mut path = if params.k_n < n_x {
        coarse_field(h, x, params.k_n..=n_x - 1, opts)?.values
    } else {
        vec![]
    };
    // S_{n(x)} = 0 by definition
    path.push((n_x, 0.0));
    let pass = truncation_holds(&path, n_x, params.a_n, m);
    Ok(TruncationRecord { x: LatticePoint(x.to_vec()), m, pass, path, n_x })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub position: Vec<f64>,
    pub height: f64,
}

/// `Σ δ_{x/N} ⊗ δ_{h_x − a_N}` with weight `1/K_N` per atom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMeasure {
    pub atoms: Vec<Atom>,
    pub weight: f64,
    pub truncated: Option<f64>,
    /// Atoms with height below this were not recorded.
    pub height_floor: Option<f64>,
}

/// Builds `η_N`, or `η̂_N^M` when `m` is given. A `height_floor` restricts
/// the measure to heights `≥ floor` (the truncation event is then only
/// evaluated for atoms that are kept).
pub fn build_eta(
    h: &FieldSample,
    params: &ScalingParams,
    m: Option<f64>,
    height_floor: Option<f64>,
    opts: &SolverOptions,
) -> Result<PointMeasure> {
    let n = params.n as f64;
    let mut atoms = Vec::new();
    for (p, v) in h.domain.points().zip(&h.values) {
        let height = v - params.a_n;
        if height_floor.is_some_and(|f| height < f) || !params.in_margin(p) {
            continue;
        }
        if let Some(m) = m {
            if !truncation_event(h, p, m, params, opts)?.pass {
                continue;
            }
        }
        atoms.push(Atom { position: p.iter().map(|c| *c as f64 / n).collect(), height });
    }
    Ok(PointMeasure { atoms, weight: 1.0 / params.k_norm, truncated: m, height_floor })
}

/// Test functions for [`integrate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TestFunction {
    /// `1_{[lo, hi)}(position) · 1_{[h_lo, h_hi)}(height)`; `None` region
    /// means everything.
    Product { region: Option<(Vec<f64>, Vec<f64>)>, h_lo: f64, h_hi: f64 },
    /// Piecewise constant on `cells^d` position cells of `[0,1)^d` times
    /// the height bins `edges[i]..edges[i+1]`; `values` indexed
    /// `[cell][bin]`.
    Tabulated { cells: usize, edges: Vec<f64>, values: Vec<f64> },
}

impl TestFunction {
    pub fn eval(&self, pos: &[f64], height: f64) -> f64 {
        match self {
            TestFunction::Product { region, h_lo, h_hi } => {
                let inside = region.as_ref().is_none_or(|(lo, hi)| {
                    pos.iter().enumerate().all(|(a, x)| lo[a] <= *x && *x < hi[a])
                });
                if inside && *h_lo <= height && height < *h_hi {
                    1.0
                } else {
                    0.0
                }
            }
            TestFunction::Tabulated { cells, edges, values } => {
                let Some(bin) = edges.windows(2).position(|w| w[0] <= height && height < w[1]) else {
                    return 0.0;
                };
                let mut cell = 0usize;
                for x in pos {
                    if !(0.0..1.0).contains(x) {
                        return 0.0;
                    }
                    cell = cell * cells + ((x * *cells as f64) as usize).min(cells - 1);
                }
                values[cell * (edges.len() - 1) + bin]
            }
        }
    }
}

/// `⟨η, f⟩ = Σ_atoms weight · f(position, height)`.
pub fn integrate(measure: &PointMeasure, f: &TestFunction) -> f64 {
    measure.atoms.iter().map(|a| measure.weight * f.eval(&a.position, a.height)).sum()
}

/// `e^{−πλb}/(4λ√π) · ∫_A e^{(4λ²/γ) s_D(x)} dx · K_N`, with the integral
/// replaced by a lattice sum of `s` estimates over `N·A ∩ D_N` (half-open
/// `A = [lo, hi)`).
pub fn predicted_moment(lo: &[f64], hi: &[f64], b: f64, params: &ScalingParams, s: &SField) -> Result<f64> {
    if lo.iter().zip(hi).any(|(l, h)| l >= h) {
        return Ok(0.0);
    }
    if lo.iter().any(|l| *l <= 0.0) || hi.iter().any(|h| *h >= 1.0) {
        return Err(LabError::Precondition("region must lie compactly inside the domain".into()));
    }
    let lam = params.lambda;
    let integral = s.integrate_exp(4.0 * lam * lam / GAMMA, lo, hi);
    Ok((-params.beta() * b).exp() / (4.0 * lam * std::f64::consts::PI.sqrt()) * integral * params.k_norm)
}

/// `E|Γ_N(b) ∩ N·[lo,hi)| = Σ_z P(h_z ≥ a_N + b)` from the exact Gaussian
/// marginals `N(0, G(z,z))`.
pub fn exact_expected_count(lo: &[f64], hi: &[f64], b: f64, params: &ScalingParams, s: &SField) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let n = params.n as f64;
    let shift = GAMMA * n.ln();
    s.domain
        .points()
        .zip(&s.values)
        .filter(|(p, _)| in_half_open(p, n, lo, hi))
        .map(|(_, sv)| std.sf((params.a_n + b) / (sv + shift).sqrt()))
        .sum()
}

/// Per-replica level-set statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaLevelStats {
    pub replica: usize,
    /// `|Γ_N(b) ∩ region|` for each `b` requested.
    pub counts: Vec<usize>,
    /// Overshoots `h(x) − a_N` over `Γ_N(0) ∩ region`.
    pub overshoots: Vec<f64>,
}

/// Counts and overshoots in one field, restricted to `N·[lo,hi)` (or the
/// `ε` margin when no region is given).
pub fn level_stats(
    h: &FieldSample,
    params: &ScalingParams,
    b_list: &[f64],
    region: Option<(&[f64], &[f64])>,
    replica: usize,
) -> ReplicaLevelStats {
    let n = params.n as f64;
    let mut counts = vec![0usize; b_list.len()];
    let mut overshoots = Vec::new();
    for (p, v) in h.domain.points().zip(&h.values) {
        let keep = match region {
            Some((lo, hi)) => in_half_open(p, n, lo, hi),
            None => params.in_margin(p),
        };
        if !keep {
            continue;
        }
        let u = v - params.a_n;
        for (c, b) in counts.iter_mut().zip(b_list) {
            if u >= *b {
                *c += 1;
            }
        }
        if u >= 0.0 {
            overshoots.push(u);
        }
    }
    ReplicaLevelStats { replica, counts, overshoots }
}

/// Samples `replicas` fields on `box(4, N)` and collects level statistics.
pub fn sample_level_stats(
    params: &ScalingParams,
    replicas: usize,
    master_seed: u64,
    experiment: &str,
    b_list: &[f64],
    region: Option<(&[f64], &[f64])>,
    opts: &SolverOptions,
) -> Result<Vec<ReplicaLevelStats>> {
    let dom = Arc::new(make_box(4, params.n)?);
    let sampler = sampler_for(dom, opts)?;
    try_par_replicas(replicas, |r| {
        let mut stream = split_stream(master_seed, experiment, r as u64, "field");
        let h = sampler.sample(&mut stream)?;
        Ok(level_stats(&h, params, b_list, region, r))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensusRow {
    pub lambda: f64,
    pub n: i64,
    pub replica: usize,
    pub count: usize,
    pub overshoot_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensusReport {
    pub lambda: f64,
    pub margin: Option<f64>,
    pub rows: Vec<CensusRow>,
    /// `(N, summary of |Γ_N(0)|)`.
    pub means: Vec<(i64, Summary)>,
    pub slope: f64,
    pub slope_stderr: f64,
    pub expected_slope: f64,
}

/// Fits `ln E|Γ_N(0)|` against `ln N`; the predicted exponent is
/// `4(1 − λ²)`.
pub fn census_from_means(sizes: &[i64], means: &[f64]) -> Result<(f64, f64)> {
    let xs: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let f = fit_loglog(&xs, means, FitMode::LogLog)?;
    Ok((f.slope, f.stderr))
}

pub fn census_experiment(
    lambda: f64,
    sizes: &[i64],
    replicas: usize,
    master_seed: u64,
    margin: Option<f64>,
    opts: &SolverOptions,
) -> Result<CensusReport> {
    if sizes.len() < 3 {
        return Err(LabError::InsufficientData("census needs at least 3 sizes".into()));
    }
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for &n in sizes {
        let mut params = scaling_params(lambda, n, None)?;
        params.epsilon_margin = margin;
        let stats = sample_level_stats(
            &params,
            replicas,
            master_seed,
            &format!("census/lambda={lambda}/N={n}"),
            &[0.0],
            None,
            opts,
        )?;
        let counts: Vec<f64> = stats.iter().map(|s| s.counts[0] as f64).collect();
        for s in &stats {
            rows.push(CensusRow {
                lambda,
                n,
                replica: s.replica,
                count: s.counts[0],
                overshoot_mean: (!s.overshoots.is_empty())
                    .then(|| s.overshoots.iter().sum::<f64>() / s.overshoots.len() as f64),
            });
        }
        means.push((n, summarize(&counts)?));
    }
    let m: Vec<f64> = means.iter().map(|(_, s)| s.mean).collect();
    let (slope, slope_stderr) = census_from_means(sizes, &m)?;
    Ok(CensusReport {
        lambda,
        margin,
        rows,
        means,
        slope,
        slope_stderr,
        expected_slope: 4.0 * (1.0 - lambda * lambda),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub b: f64,
    pub mean_count: f64,
    pub ratio: f64,
    pub predicted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub lambda: f64,
    pub replicas: usize,
    pub overshoots: usize,
    /// Rate fitted on overshoots within `[0, window]`.
    pub overshoot_rate: f64,
    pub overshoot_rate_stderr: f64,
    pub window: f64,
    /// Plain exponential MLE over all overshoots, for reference.
    pub untruncated_rate: f64,
    pub predicted_rate: f64,
    pub ratio_table: Vec<RatioRow>,
}

/// Overshoot rate and level-set ratios `E|Γ(b)|/E|Γ(0)|` from replica
/// statistics gathered with `b_list` (which must contain 0).
pub fn tail_checks(
    stats: &[ReplicaLevelStats],
    params: &ScalingParams,
    b_list: &[f64],
    window: f64,
) -> Result<TailReport> {
    let pooled: Vec<f64> = stats.iter().flat_map(|s| s.overshoots.iter().copied()).collect();
    if pooled.is_empty() {
        return Err(LabError::InsufficientData("no level-set points in any replica".into()));
    }
    let zero = b_list
        .iter()
        .position(|b| *b == 0.0)
        .ok_or_else(|| LabError::InvalidParameter("b list must contain 0".into()))?;
    let windowed: Vec<f64> = pooled.iter().copied().filter(|u| *u <= window).collect();
    let (rate, se) = truncated_exponential_rate_mle(&windowed, window)?;
    let (plain, _) = exponential_rate_mle(&pooled)?;
    let mean_count = |i: usize| {
        stats.iter().map(|s| s.counts[i] as f64).sum::<f64>() / stats.len() as f64
    };
    let base = mean_count(zero);
    let ratio_table = b_list
        .iter()
        .enumerate()
        .map(|(i, &b)| RatioRow {
            b,
            mean_count: mean_count(i),
            ratio: mean_count(i) / base,
            predicted: (-params.beta() * b).exp(),
        })
        .collect();
    Ok(TailReport {
        lambda: params.lambda,
        replicas: stats.len(),
        overshoots: pooled.len(),
        overshoot_rate: rate,
        overshoot_rate_stderr: se,
        window,
        untruncated_rate: plain,
        predicted_rate: params.beta(),
        ratio_table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::rng::RngStream;
    use crate::lattice::LatticeDomain;
    use proptest::prelude::*;

    fn field(points: Vec<Vec<i64>>, values: Vec<f64>) -> FieldSample {
        FieldSample {
            domain: Arc::new(LatticeDomain::from_points(4, points).unwrap()),
            values,
            provenance: RngStream::new(0, &["t"]).provenance(),
        }
    }

    #[test]
    fn scaling_reference_values() {
        let p = scaling_params(0.5, 100, None).unwrap();
        assert!((p.a_n - 5.8632).abs() < 5e-4, "{}", p.a_n);
        assert!((p.a_n - 4.0 / std::f64::consts::PI * 100f64.ln()).abs() < 1e-12);
        assert!((p.k_norm / 4.6599e5 - 1.0).abs() < 1e-4, "{}", p.k_norm);
        assert_eq!(p.k_n, 1);
        let zero = scaling_params(0.5, 100, Some(0.0)).unwrap();
        let ln = 100f64.ln();
        assert!((zero.k_norm - 1e8 / ln.sqrt()).abs() < 1e-6 * zero.k_norm);
        let same = scaling_params(0.5, 100, Some(p.a_n)).unwrap();
        assert_eq!(same.k_norm, p.k_norm);
        assert!(scaling_params(1.0, 100, None).is_err());
        assert!(scaling_params(0.5, 2, None).is_err());
    }

    #[test]
    fn level_set_thresholds() {
        let p = scaling_params(0.5, 16, None).unwrap();
        let a = p.a_n;
        let h = field(vec![vec![1; 4], vec![2; 4], vec![3; 4]], vec![a + 1.0, a - 1.0, a + 1.0]);
        let g = extract_level_set(&h, &p, 0.0);
        assert_eq!(g.points, vec![LatticePoint(vec![1; 4]), LatticePoint(vec![3; 4])]);
        assert!(extract_level_set(&h, &p, 1e6).points.is_empty());
        assert_eq!(extract_level_set(&h, &p, -1e6).points.len(), 3);
    }

    #[test]
    fn truncation_logic() {
        // n = 4, a = 8: the line is 8, 6, 4, 2, 0
        let ok = [(0, 8.0), (1, 6.5), (2, 4.0), (3, 2.0), (4, 0.0)];
        assert!(truncation_holds(&ok, 4, 8.0, 1.0));
        let bad = [(0, 8.0), (1, 9.0), (4, 0.0)];
        assert!(!truncation_holds(&bad, 4, 8.0, 1.0));
        assert!(truncation_holds(&bad, 4, 8.0, 1e9));
        assert!(truncation_holds(&[(4, 0.0)], 4, 8.0, 0.0));
    }

    #[test]
    fn zero_field_measure_and_integrals() {
        let p = scaling_params(0.5, 16, None).unwrap();
        let dom = Arc::new(make_box(4, 4).unwrap());
        let h = FieldSample {
            values: vec![0.0; dom.len()],
            domain: dom,
            provenance: RngStream::new(0, &["z"]).provenance(),
        };
        let eta = build_eta(&h, &p, None, None, &SolverOptions::default()).unwrap();
        assert_eq!(eta.atoms.len(), 81);
        assert!(eta.atoms.iter().all(|a| a.height == -p.a_n));
        assert!(eta.weight == 1.0 / p.k_norm);
        let all = TestFunction::Product { region: None, h_lo: f64::NEG_INFINITY, h_hi: f64::INFINITY };
        assert!((integrate(&eta, &all) - 81.0 / p.k_norm).abs() < 1e-15);
        let none = TestFunction::Product { region: None, h_lo: 0.0, h_hi: f64::INFINITY };
        assert_eq!(integrate(&eta, &none), 0.0);
    }

    #[test]
    fn integrate_hand_sum() {
        let m = PointMeasure {
            atoms: vec![
                Atom { position: vec![0.25; 4], height: 0.5 },
                Atom { position: vec![0.75; 4], height: 2.0 },
            ],
            weight: 0.1,
            truncated: None,
            height_floor: None,
        };
        let half = TestFunction::Product {
            region: Some((vec![0.0; 4], vec![0.5; 4])),
            h_lo: 0.0,
            h_hi: f64::INFINITY,
        };
        assert!((integrate(&m, &half) - 0.1).abs() < 1e-15);
        let tab = TestFunction::Tabulated {
            cells: 2,
            edges: vec![0.0, 1.0, 3.0],
            values: (0..32).map(|i| i as f64).collect(),
        };
        // atom 1: cell 0, bin 0 -> 0; atom 2: cell 15, bin 1 -> 31
        assert!((integrate(&m, &tab) - 3.1).abs() < 1e-12);
    }

    #[test]
    fn truncated_atoms_are_a_subset() {
        let p = scaling_params(0.3, 16, None).unwrap();
        let s = sampler_for(Arc::new(make_box(4, 8).unwrap()), &SolverOptions::default()).unwrap();
        let h = s.sample(&mut RngStream::new(1, &["eta"])).unwrap();
        let opts = SolverOptions::default();
        let full = build_eta(&h, &p, None, Some(-2.0), &opts).unwrap();
        for m in [0.1, 1.0, 5.0] {
            let t = build_eta(&h, &p, Some(m), Some(-2.0), &opts).unwrap();
            assert!(t.atoms.iter().all(|a| full.atoms.contains(a)));
        }
        let pos = TestFunction::Product { region: None, h_lo: 0.0, h_hi: f64::INFINITY };
        let g0 = extract_level_set(&h, &p, 0.0).points.len();
        assert!((integrate(&full, &pos) - g0 as f64 / p.k_norm).abs() < 1e-15);
    }

    #[test]
    fn predicted_moment_ratios() {
        let p = scaling_params(0.5, 16, None).unwrap();
        let dom = Arc::new(make_box(4, 8).unwrap());
        let s = SField { values: vec![0.3; dom.len()], domain: dom, resolution: 8 };
        let (lo, hi) = (vec![0.25; 4], vec![0.75; 4]);
        let m0 = predicted_moment(&lo, &hi, 0.0, &p, &s).unwrap();
        let m1 = predicted_moment(&lo, &hi, 1.0, &p, &s).unwrap();
        assert!((m1 / m0 - (-p.beta()).exp()).abs() < 1e-14);
        assert_eq!(predicted_moment(&lo, &lo, 0.0, &p, &s).unwrap(), 0.0);
        assert!(predicted_moment(&[0.0; 4], &hi, 0.0, &p, &s).is_err());
    }

    #[test]
    fn tail_checks_on_synthetic_overshoots() {
        let p = scaling_params(0.3, 16, None).unwrap();
        let mut rng = RngStream::new(2, &["tail"]);
        let rate = p.beta();
        let stats: Vec<ReplicaLevelStats> = (0..200)
            .map(|r| {
                let ov: Vec<f64> = (0..50).map(|_| -(-rng.uniform()).ln_1p() / rate).collect();
                let counts = vec![ov.len(), ov.iter().filter(|u| **u >= 0.5).count()];
                ReplicaLevelStats { replica: r, counts, overshoots: ov }
            })
            .collect();
        let t = tail_checks(&stats, &p, &[0.0, 0.5], 1.0).unwrap();
        assert!((t.overshoot_rate - rate).abs() < 2.0 * t.overshoot_rate_stderr, "{t:?}");
        assert_eq!(t.ratio_table[0].ratio, 1.0);
        assert!((t.ratio_table[1].ratio - (-rate * 0.5).exp()).abs() < 0.05);
        let empty: Vec<ReplicaLevelStats> =
            vec![ReplicaLevelStats { replica: 0, counts: vec![0], overshoots: vec![] }];
        assert!(matches!(tail_checks(&empty, &p, &[0.0], 1.0), Err(LabError::InsufficientData(_))));
    }

    #[test]
    fn census_slope_regression() {
        let sizes = [8, 12, 16];
        let means: Vec<f64> = sizes.iter().map(|&n| 2.0 * (n as f64).powi(3)).collect();
        let (slope, _) = census_from_means(&sizes, &means).unwrap();
        assert!((slope - 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn closed_forms_hold(lambda in 0.01f64..0.99, n in 3i64..10_000) {
            let p = scaling_params(lambda, n, None).unwrap();
            let ln = (n as f64).ln();
            prop_assert!((p.a_n * std::f64::consts::PI / (8.0 * ln) - lambda).abs() <= 1e-9 * lambda);
            let closed = (n as f64).powf(4.0 - 4.0 * lambda * lambda) / ln.sqrt();
            prop_assert!((p.k_norm - closed).abs() <= 1e-9 * p.k_norm);
        }

        #[test]
        fn level_sets_are_monotone(b in -3.0f64..3.0, db in 0.0f64..2.0, seed in 0u64..50) {
            let p = scaling_params(0.2, 8, None).unwrap();
            let dom = Arc::new(make_box(4, 4).unwrap());
            let values = RngStream::new(seed, &["mono"]).normals(dom.len());
            let h = FieldSample { domain: dom, values, provenance: RngStream::new(0, &["x"]).provenance() };
            let hi = extract_level_set(&h, &p, b + db);
            let lo = extract_level_set(&h, &p, b);
            prop_assert!(hi.points.iter().all(|x| lo.points.contains(x)));
        }
    }
}
