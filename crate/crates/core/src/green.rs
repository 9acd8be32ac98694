//! Green functions of the membrane model and the asymptotic quantities
//! built from them: the log-divergence constant, the harmonic correction
//! `s_D`, coarse covariances and the uniform-bound monitor.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::harness::stats::{fit_loglog, FitMode};
use crate::lattice::{
    assemble_precision, make_box, make_dyadic_union, symmetry_orbits, DomainDescriptor,
    DyadicCube, LatticeDomain, LatticePoint,
};
use crate::solver::{LinearSolver, SolverOptions};

/// `γ = 8/π²`.
pub const GAMMA: f64 = 8.0 / (std::f64::consts::PI * std::f64::consts::PI);

/// Default exponent in the boundary-distance precondition `(ln N)^θ / N`.
pub const DEFAULT_THETA: f64 = 2.0;

/// One column `G^V(·, y)`.
#[derive(Clone, Debug)]
pub struct GreenColumn {
    pub source: LatticePoint,
    pub source_index: usize,
    pub values: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

impl GreenColumn {
    pub fn at(&self, domain: &LatticeDomain, x: &[i64]) -> Result<f64> {
        domain
            .index_of(x)
            .map(|i| self.values[i])
            .ok_or_else(|| LabError::PointOutsideDomain { point: x.to_vec() })
    }
}

/// Factorizes (or preconditions) the precision operator of `domain`.
pub fn green_solver(domain: Arc<LatticeDomain>, opts: &SolverOptions) -> Result<LinearSolver> {
    LinearSolver::new(Arc::new(assemble_precision(domain)), opts)
}

fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[i] = 1.0;
    e
}

/// Solves `Δ² G(·, y) = δ_y` with zero data on the double boundary.
pub fn solve_green_column(solver: &LinearSolver, y: &[i64]) -> Result<GreenColumn> {
    let domain = solver.operator().domain();
    let j = domain
        .index_of(y)
        .ok_or_else(|| LabError::PointOutsideDomain { point: y.to_vec() })?;
    let sol = solver.solve(&unit(domain.len(), j))?;
    Ok(GreenColumn {
        source: LatticePoint(y.to_vec()),
        source_index: j,
        values: sol.values,
        residual: sol.residual,
        iterations: sol.iterations,
    })
}

/// Several columns at once.
pub fn solve_green_columns(solver: &LinearSolver, ys: &[Vec<i64>]) -> Result<Vec<GreenColumn>> {
    let domain = solver.operator().domain();
    let idx: Vec<usize> = ys
        .iter()
        .map(|y| domain.index_of(y).ok_or_else(|| LabError::PointOutsideDomain { point: y.clone() }))
        .collect::<Result<_>>()?;
    let rhs: Vec<Vec<f64>> = idx.iter().map(|&j| unit(domain.len(), j)).collect();
    let sols = solver.solve_many(&rhs)?;
    Ok(ys
        .iter()
        .zip(idx)
        .zip(sols)
        .map(|((y, j), s)| GreenColumn {
            source: LatticePoint(y.clone()),
            source_index: j,
            values: s.values,
            residual: s.residual,
            iterations: s.iterations,
        })
        .collect())
}

/// Largest `|G(x,y) − G(y,x)|` over all pairs of sources of the columns.
pub fn symmetry_defect(columns: &[GreenColumn]) -> f64 {
    let mut worst = 0.0f64;
    for a in columns {
        for b in columns {
            worst = worst.max((a.values[b.source_index] - b.values[a.source_index]).abs());
        }
    }
    worst
}

/// `G(x,x)` for each requested point. Points related by a symmetry of the
/// domain share one solve.
pub fn green_diagonal(solver: &LinearSolver, points: &[Vec<i64>]) -> Result<Vec<f64>> {
    let domain = solver.operator().domain();
    let idx: Vec<usize> = points
        .iter()
        .map(|p| domain.index_of(p).ok_or_else(|| LabError::PointOutsideDomain { point: p.clone() }))
        .collect::<Result<_>>()?;
    let rep = orbit_representatives(domain);
    let mut needed: BTreeMap<usize, f64> = idx.iter().map(|&i| (rep[i], f64::NAN)).collect();
    let reps: Vec<usize> = needed.keys().copied().collect();
    let rhs: Vec<Vec<f64>> = reps.iter().map(|&r| unit(domain.len(), r)).collect();
    for (r, sol) in reps.iter().zip(solver.solve_many(&rhs)?) {
        needed.insert(*r, sol.values[*r]);
    }
    Ok(idx.iter().map(|&i| needed[&rep[i]]).collect())
}

/// `G(x,x)` at every point of the domain.
pub fn green_diagonal_all(solver: &LinearSolver) -> Result<Vec<f64>> {
    let domain = solver.operator().domain();
    let pts: Vec<Vec<i64>> = domain.points().map(|p| p.to_vec()).collect();
    green_diagonal(solver, &pts)
}

fn orbit_representatives(domain: &LatticeDomain) -> Vec<usize> {
    let mut rep = vec![0usize; domain.len()];
    for (r, orbit) in symmetry_orbits(domain) {
        for i in orbit {
            rep[i] = r;
        }
    }
    rep
}

/// The center `⌊N/2⌋·(1,…,1)` of `box(d, N)`.
pub fn box_center(dim: usize, side: i64) -> Vec<i64> {
    vec![side / 2; dim]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaFit {
    pub sizes: Vec<i64>,
    pub center_values: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
}

/// Least-squares slope of `G(center, center)` against `ln N`.
pub fn fit_gamma_values(sizes: &[i64], values: &[f64]) -> Result<GammaFit> {
    let xs: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let f = fit_loglog(&xs, values, FitMode::SemiLog)?;
    Ok(GammaFit {
        sizes: sizes.to_vec(),
        center_values: values.to_vec(),
        slope: f.slope,
        intercept: f.intercept,
        stderr: f.stderr,
    })
}

/// Solves one center column per box size in `d = 4` and fits the slope.
pub fn fit_gamma(sizes: &[i64], opts: &SolverOptions) -> Result<GammaFit> {
    if sizes.len() < 3 {
        return Err(LabError::InsufficientData(format!(
            "{} sizes; need at least 3",
            sizes.len()
        )));
    }
    let values = sizes
        .iter()
        .map(|&n| {
            let solver = green_solver(Arc::new(make_box(4, n)?), opts)?;
            let col = solve_green_column(&solver, &box_center(4, n))?;
            Ok(col.values[col.source_index])
        })
        .collect::<Result<Vec<f64>>>()?;
    fit_gamma_values(sizes, &values)
}

/// A finite union of disjoint open dyadic cubes (side `2^{-level}`, so
/// negative levels give cubes larger than the unit cube).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuumDomain {
    pub cubes: Vec<DyadicCube>,
}

impl ContinuumDomain {
    pub fn new(cubes: Vec<DyadicCube>) -> Self {
        ContinuumDomain { cubes }
    }

    pub fn unit(dim: usize) -> Self {
        ContinuumDomain::new(vec![DyadicCube::unit(dim)])
    }

    pub fn dim(&self) -> usize {
        self.cubes.first().map_or(0, |c| c.dim())
    }

    pub fn volume(&self) -> f64 {
        self.cubes.iter().map(|c| c.volume()).sum()
    }

    /// `2^k D`.
    pub fn scaled(&self, k: i32) -> Self {
        ContinuumDomain::new(
            self.cubes
                .iter()
                .map(|c| DyadicCube::new(c.level - k, c.index.clone()))
                .collect(),
        )
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.cubes.iter().any(|c| c.contains(x))
    }

    /// ℓ∞ distance from `x` to the complement of the domain.
    pub fn boundary_distance(&self, x: &[f64]) -> f64 {
        self.cubes.iter().map(|c| c.boundary_distance(x)).fold(0.0, f64::max)
    }

    pub fn lattice(&self, resolution: i64) -> Result<LatticeDomain> {
        make_dyadic_union(&self.cubes, resolution)
    }

    pub fn descriptor(&self, resolution: i64) -> DomainDescriptor {
        DomainDescriptor::DyadicUnion {
            dim: self.dim(),
            cubes: self.cubes.clone(),
            resolution,
        }
    }
}

/// `[xN]`: component-wise floor of `N·x`, clamped into the bounding box of
/// the lattice domain; errors if the result is not a domain point.
pub fn to_lattice(x: &[f64], resolution: i64, domain: &LatticeDomain) -> Result<Vec<i64>> {
    let (lo, hi) = domain.bounds();
    let z: Vec<i64> = x
        .iter()
        .enumerate()
        .map(|(a, v)| ((v * resolution as f64).floor() as i64).clamp(lo[a], hi[a]))
        .collect();
    if domain.contains(&z) {
        Ok(z)
    } else {
        Err(LabError::PointOutsideDomain { point: z })
    }
}

/// Checks `dist(x, ∂D) ≥ (ln N)^θ / N`.
pub fn check_interior(d: &ContinuumDomain, resolution: i64, x: &[f64], theta: f64) -> Result<()> {
    let dist = d.boundary_distance(x);
    let need = (resolution as f64).ln().powf(theta) / resolution as f64;
    if dist < need {
        return Err(LabError::Precondition(format!(
            "x = {x:?} is at distance {dist:.4} from the boundary; need (ln N)^{theta}/N = {need:.4}"
        )));
    }
    Ok(())
}

/// `G^{D_N}([xN],[xN]) − γ ln N`.
#[allow(non_snake_case)]
pub fn estimate_sD(
    d: &ContinuumDomain,
    resolution: i64,
    x: &[f64],
    theta: f64,
    opts: &SolverOptions,
) -> Result<f64> {
    check_interior(d, resolution, x, theta)?;
    let dom = Arc::new(d.lattice(resolution)?);
    let z = to_lattice(x, resolution, &dom)?;
    let solver = green_solver(dom, opts)?;
    let col = solve_green_column(&solver, &z)?;
    Ok(col.values[col.source_index] - GAMMA * (resolution as f64).ln())
}

/// Lattice estimates `G^{D_N}(z,z) − γ ln N` at every point of `D_N`,
/// without the interior precondition (used for quadrature).
pub fn lattice_s_values(domain: &LatticeDomain, resolution: i64, opts: &SolverOptions) -> Result<Vec<f64>> {
    let solver = green_solver(Arc::new(domain.clone()), opts)?;
    let shift = GAMMA * (resolution as f64).ln();
    Ok(green_diagonal_all(&solver)?.into_iter().map(|g| g - shift).collect())
}

/// Lattice `s` estimates over a whole domain at one resolution.
#[derive(Clone, Debug)]
pub struct SField {
    pub domain: Arc<LatticeDomain>,
    pub resolution: i64,
    pub values: Vec<f64>,
}

impl SField {
    pub fn compute(d: &ContinuumDomain, resolution: i64, opts: &SolverOptions) -> Result<SField> {
        let domain = Arc::new(d.lattice(resolution)?);
        let values = lattice_s_values(&domain, resolution, opts)?;
        Ok(SField { domain, resolution, values })
    }

    /// Value at `[xN]`.
    pub fn at(&self, x: &[f64]) -> Result<f64> {
        let z = to_lattice(x, self.resolution, &self.domain)?;
        Ok(self.values[self.domain.index_of(&z).expect("checked")])
    }

    /// Lattice quadrature `N^{-d} Σ_{z/N ∈ [lo, hi)} e^{c·s(z)}`.
    pub fn integrate_exp(&self, c: f64, lo: &[f64], hi: &[f64]) -> f64 {
        let n = self.resolution as f64;
        let cell = n.powi(-(self.domain.dim() as i32));
        self.domain
            .points()
            .zip(&self.values)
            .filter(|(p, _)| in_half_open(p, n, lo, hi))
            .map(|(_, s)| (c * s).exp() * cell)
            .sum()
    }
}

/// `z/N ∈ [lo, hi)` componentwise.
pub fn in_half_open(z: &[i64], resolution: f64, lo: &[f64], hi: &[f64]) -> bool {
    z.iter().enumerate().all(|(a, &c)| {
        let x = c as f64 / resolution;
        lo[a] <= x && x < hi[a]
    })
}

/// `G^{D_N}([xN],[yN]) − G^{D̃_N}([xN],[yN])` for `D̃ ⊂ D`.
pub fn coarse_cov(
    d: &ContinuumDomain,
    dt: &ContinuumDomain,
    resolution: i64,
    x: &[f64],
    y: &[f64],
    theta: f64,
    opts: &SolverOptions,
) -> Result<f64> {
    let m = coarse_cov_matrix(d, dt, resolution, &[x.to_vec(), y.to_vec()], theta, opts)?;
    Ok(m[0][1])
}

/// The matrix `C(x_i, x_j)` over a list of continuum points.
pub fn coarse_cov_matrix(
    d: &ContinuumDomain,
    dt: &ContinuumDomain,
    resolution: i64,
    xs: &[Vec<f64>],
    theta: f64,
    opts: &SolverOptions,
) -> Result<Vec<Vec<f64>>> {
    for x in xs {
        check_interior(dt, resolution, x, theta)?;
    }
    let big = Arc::new(d.lattice(resolution)?);
    let small = Arc::new(dt.lattice(resolution)?);
    if small.points().any(|p| !big.contains(p)) {
        return Err(LabError::Precondition("the inner domain is not contained in the outer".into()));
    }
    let zs: Vec<Vec<i64>> = xs.iter().map(|x| to_lattice(x, resolution, &small)).collect::<Result<_>>()?;
    let cb = solve_green_columns(&green_solver(big.clone(), opts)?, &zs)?;
    let cs = solve_green_columns(&green_solver(small.clone(), opts)?, &zs)?;
    let k = zs.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            m[i][j] = cb[j].at(&big, &zs[i])? - cs[j].at(&small, &zs[i])?;
        }
    }
    Ok(m)
}

/// Smallest eigenvalue of a small symmetric matrix.
pub fn min_eigenvalue(m: &[Vec<f64>]) -> f64 {
    let k = m.len();
    let mat = faer::Mat::from_fn(k, k, |i, j| 0.5 * (m[i][j] + m[j][i]));
    let ev = mat
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .expect("symmetric eigenvalues");
    ev.into_iter().fold(f64::INFINITY, f64::min)
}

/// `sup |G(x,y) − γ ln(2 + N·max(d(x/N), d(y/N)) / (1 + |x − y|))|` over the
/// sampled pairs, with `d` the ℓ∞ distance to `∂D` and `|·|` Euclidean.
pub fn uniform_bound_monitor(
    d: &ContinuumDomain,
    resolution: i64,
    pairs: &[(Vec<i64>, Vec<i64>)],
    opts: &SolverOptions,
) -> Result<f64> {
    let dom = Arc::new(d.lattice(resolution)?);
    let solver = green_solver(dom.clone(), opts)?;
    let mut by_source: BTreeMap<Vec<i64>, Vec<Vec<i64>>> = BTreeMap::new();
    for (x, y) in pairs {
        by_source.entry(y.clone()).or_default().push(x.clone());
    }
    let sources: Vec<Vec<i64>> = by_source.keys().cloned().collect();
    let cols = solve_green_columns(&solver, &sources)?;
    let n = resolution as f64;
    let scaled = |p: &[i64]| -> Vec<f64> { p.iter().map(|c| *c as f64 / n).collect() };
    let mut worst = 0.0f64;
    for (col, y) in cols.iter().zip(&sources) {
        for x in &by_source[y] {
            let g = col.at(&dom, x)?;
            let dist = d.boundary_distance(&scaled(x)).max(d.boundary_distance(&scaled(y)));
            let sep = x.iter().zip(y).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
            let pred = GAMMA * (2.0 + n * dist / (1.0 + sep)).ln();
            worst = worst.max((g - pred).abs());
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SEstimate {
    pub domain: DomainDescriptor,
    pub x: Vec<f64>,
    pub s: f64,
}

/// Summary emitted by the `green` diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreenDiagnostics {
    pub gamma_hat: f64,
    pub stderr: f64,
    #[serde(rename = "sD")]
    pub s_d: Vec<SEstimate>,
    pub uniform_residual: Option<f64>,
}

/// Dense inverse of the precision operator, for small domains.
pub fn dense_green_matrix(domain: Arc<LatticeDomain>) -> Result<faer::Mat<f64>> {
    use faer::linalg::solvers::DenseSolveCore;
    let a = assemble_precision(domain).to_dense();
    let llt = a.llt(faer::Side::Lower).map_err(|e| LabError::Factorization(format!("{e:?}")))?;
    Ok(llt.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeDomain;

    fn solver_for(d: LatticeDomain) -> LinearSolver {
        green_solver(Arc::new(d), &SolverOptions::default()).unwrap()
    }

    #[test]
    fn single_point_and_two_point_oracles() {
        let s = solver_for(make_box(4, 2).unwrap());
        let g = solve_green_column(&s, &[1, 1, 1, 1]).unwrap();
        assert!((g.values[0] - 8.0 / 9.0).abs() < 1e-12);
        assert_eq!(green_diagonal(&s, &[vec![1, 1, 1, 1]]).unwrap(), vec![g.values[0]]);
        let s = solver_for(LatticeDomain::from_points(1, vec![vec![1], vec![2]]).unwrap());
        let c = solve_green_columns(&s, &[vec![1], vec![2]]).unwrap();
        let want = [[1.2, 0.8], [0.8, 1.2]];
        for j in 0..2 {
            for i in 0..2 {
                assert!((c[j].values[i] - want[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_and_symmetry_on_small_box() {
        let s = solver_for(make_box(3, 7).unwrap());
        let ys = vec![vec![1, 1, 1], vec![3, 2, 5], vec![6, 6, 1], vec![3, 3, 3]];
        let cols = solve_green_columns(&s, &ys).unwrap();
        for c in &cols {
            assert!(c.residual <= 1e-10);
            assert!(c.values[c.source_index] > 0.0);
        }
        assert!(symmetry_defect(&cols) <= 1e-9);
    }

    #[test]
    fn diagonal_by_orbits_matches_direct() {
        let dom = make_box(3, 6).unwrap();
        let s = solver_for(dom.clone());
        let all = green_diagonal_all(&s).unwrap();
        let dense = dense_green_matrix(Arc::new(dom)).unwrap();
        for (i, g) in all.iter().enumerate() {
            assert!((g - dense[(i, i)]).abs() < 1e-10);
        }
    }

    #[test]
    fn monotone_under_inclusion() {
        let small = make_box(4, 6).unwrap();
        let big = LatticeDomain::region(vec![-1; 4], vec![7; 4]).unwrap();
        let x = vec![3; 4];
        let gs = green_diagonal(&solver_for(small), &[x.clone()]).unwrap()[0];
        let gb = green_diagonal(&solver_for(big), &[x]).unwrap()[0];
        assert!(gb > gs);
    }

    #[test]
    fn synthetic_gamma_fit() {
        let sizes = [8, 12, 16, 24, 32];
        let vals: Vec<f64> = sizes.iter().map(|&n| 0.5 * (n as f64).ln() + 1.0).collect();
        let f = fit_gamma_values(&sizes, &vals).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12);
        assert!(fit_gamma(&[8, 12], &SolverOptions::default()).is_err());
    }

    #[test]
    fn center_difference_tracks_gamma_log2() {
        let opts = SolverOptions::default();
        let g = |n: i64| {
            let s = green_solver(Arc::new(make_box(4, n).unwrap()), &opts).unwrap();
            green_diagonal(&s, &[box_center(4, n)]).unwrap()[0]
        };
        let (g8, g16) = (g(8), g(16));
        assert!(g16 > g8);
        assert!((g16 - g8 - GAMMA * 2f64.ln()).abs() < 0.15, "{}", g16 - g8);
    }

    #[test]
    fn s_estimates_translation_and_precondition() {
        let opts = SolverOptions::default();
        let d = ContinuumDomain::new(vec![DyadicCube::new(1, vec![0, 0, 0, 0])]);
        let moved = ContinuumDomain::new(vec![DyadicCube::new(1, vec![1, 0, 1, 0])]);
        let x = [0.25; 4];
        let y = [0.75, 0.25, 0.75, 0.25];
        let a = estimate_sD(&d, 16, &x, 1.0, &opts).unwrap();
        let b = estimate_sD(&moved, 16, &y, 1.0, &opts).unwrap();
        assert_eq!(a, b);
        let err = estimate_sD(&d, 16, &[0.05, 0.25, 0.25, 0.25], 1.0, &opts);
        assert!(matches!(err, Err(LabError::Precondition(_))));
    }

    #[test]
    fn coarse_cov_properties() {
        let opts = SolverOptions::default();
        let d = ContinuumDomain::unit(4);
        let dt = ContinuumDomain::new(vec![DyadicCube::new(1, vec![0, 0, 0, 0])]);
        let pts = vec![vec![0.25; 4], vec![0.3, 0.25, 0.2, 0.25], vec![0.2, 0.3, 0.25, 0.25]];
        let same = coarse_cov_matrix(&dt, &dt, 16, &pts, 0.5, &opts).unwrap();
        assert!(same.iter().flatten().all(|v| *v == 0.0));
        let m = coarse_cov_matrix(&d, &dt, 16, &pts, 0.5, &opts).unwrap();
        for i in 0..3 {
            assert!(m[i][i] >= -1e-9);
            for j in 0..3 {
                assert!((m[i][j] - m[j][i]).abs() <= 1e-9);
            }
        }
        assert!(min_eigenvalue(&m) >= -1e-9);
    }

    #[test]
    fn to_lattice_floors_and_clamps() {
        let dom = make_box(4, 8).unwrap();
        assert_eq!(to_lattice(&[0.5; 4], 8, &dom).unwrap(), vec![4; 4]);
        assert_eq!(to_lattice(&[0.0, 0.99, 0.5, 0.5], 8, &dom).unwrap(), vec![1, 7, 4, 4]);
    }

    #[test]
    fn monitor_is_finite() {
        let d = ContinuumDomain::unit(4);
        let pairs = vec![
            (vec![4; 4], vec![4; 4]),
            (vec![1; 4], vec![7; 4]),
            (vec![2, 3, 4, 5], vec![4; 4]),
        ];
        let r = uniform_bound_monitor(&d, 8, &pairs, &SolverOptions::default()).unwrap();
        assert!(r.is_finite());
    }
}
