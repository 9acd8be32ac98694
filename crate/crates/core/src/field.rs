//! Exact sampling of the membrane model, conditional means (biharmonic
//! extension), the Gibbs–Markov split, the orthonormal-basis sampler and
//! coarse fields `S_k(x)`.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::green::{dense_green_matrix, green_solver, solve_green_column};
use crate::harness::rng::{Provenance, RngStream};
use crate::lattice::{
    assemble_precision, hierarchy, linf_ball, BoxHierarchy, DomainDescriptor, HierarchyBox,
    LatticeDomain, LatticePoint, PrecisionOperator,
};
use crate::solver::{LinearSolver, SolverOptions};

/// Largest domain accepted by the Gram–Schmidt basis sampler.
pub const MAX_BASIS_POINTS: usize = 2000;

/// One realization of the field on a domain (zero outside it).
#[derive(Clone, Debug)]
pub struct FieldSample {
    pub domain: Arc<LatticeDomain>,
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl FieldSample {
    pub fn value_at(&self, p: &[i64]) -> f64 {
        self.domain.index_of(p).map_or(0.0, |i| self.values[i])
    }
}

/// A prepared sampler for `N(0, A⁻¹)`.
///
/// Dense samplers map white noise through `L⁻ᵀ` (with `A = L Lᵀ`). The
/// noise-driven path `h = A⁻¹ (Δ z)|_V`, `z` white on `V ∪ ∂₁V`, has the
/// same law for either backend and is what iterative samplers use.
#[derive(Debug)]
pub struct FieldSampler {
    solver: LinearSolver,
}

pub fn prepare_sampler(op: Arc<PrecisionOperator>, opts: &SolverOptions) -> Result<FieldSampler> {
    Ok(FieldSampler { solver: LinearSolver::new(op, opts)? })
}

/// Convenience: sampler for the membrane model on `domain`.
pub fn sampler_for(domain: Arc<LatticeDomain>, opts: &SolverOptions) -> Result<FieldSampler> {
    prepare_sampler(Arc::new(assemble_precision(domain)), opts)
}

impl FieldSampler {
    pub fn domain(&self) -> &Arc<LatticeDomain> {
        self.solver.operator().domain()
    }

    pub fn operator(&self) -> &Arc<PrecisionOperator> {
        self.solver.operator()
    }

    pub fn solver(&self) -> &LinearSolver {
        &self.solver
    }

    pub fn is_dense(&self) -> bool {
        self.solver.is_dense()
    }

    pub fn sample(&self, stream: &mut RngStream) -> Result<FieldSample> {
        if self.solver.is_dense() {
            let mut w = stream.normals(self.domain().len());
            self.solver.apply_inverse_factor_transpose(&mut w)?;
            Ok(FieldSample { domain: self.domain().clone(), values: w, provenance: stream.provenance() })
        } else {
            self.sample_from_noise(stream)
        }
    }

    /// `h = A⁻¹ (Δ z)|_V` with `z` drawn from `stream` over `V ∪ ∂₁V`.
    pub fn sample_from_noise(&self, stream: &mut RngStream) -> Result<FieldSample> {
        let op = self.operator();
        let z = stream.normals(op.noise_len());
        let rhs = op.laplacian_from_support(&z, &mut op.scratch());
        let sol = self.solver.solve(&rhs)?;
        Ok(FieldSample { domain: self.domain().clone(), values: sol.values, provenance: stream.provenance() })
    }

    /// Sampler for the single linear statistic `wᵀh`, exact in law.
    ///
    /// With `u = A⁻¹w` and `v = Δu` on `V ∪ ∂₁V`, the statistic equals `v·z`
    /// for the same noise `z` that [`Self::sample_from_noise`] consumes.
    pub fn functional(&self, w: &[f64]) -> Result<FunctionalSampler> {
        let u = self.solver.solve(w)?;
        let coeffs = self.operator().laplacian_to_support(&u.values);
        let variance = w.iter().zip(&u.values).map(|(a, b)| a * b).sum();
        Ok(FunctionalSampler { coeffs, variance })
    }
}

/// Draws of one linear statistic of the field.
#[derive(Clone, Debug)]
pub struct FunctionalSampler {
    coeffs: Vec<f64>,
    /// Exact variance `wᵀ A⁻¹ w`.
    pub variance: f64,
}

impl FunctionalSampler {
    pub fn sample(&self, stream: &mut RngStream) -> f64 {
        let mut z = vec![0.0; self.coeffs.len()];
        stream.fill_normal(&mut z);
        self.coeffs.iter().zip(&z).map(|(a, b)| a * b).sum()
    }

    /// Several statistics evaluated on the same noise draw.
    pub fn sample_joint(samplers: &[FunctionalSampler], stream: &mut RngStream) -> Vec<f64> {
        let n = samplers.first().map_or(0, |s| s.coeffs.len());
        let mut z = vec![0.0; n];
        stream.fill_normal(&mut z);
        samplers
            .iter()
            .map(|s| s.coeffs.iter().zip(&z).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// `{φ_n}` orthonormal under `⟨f,g⟩_Δ = Σ Δf·Δg = fᵀAg`, built by
/// Gram–Schmidt on the coordinate indicators in index order.
#[derive(Clone, Debug)]
pub struct BasisSampler {
    domain: Arc<LatticeDomain>,
    /// Column `n` is `φ_n`.
    pub basis: Mat<f64>,
}

pub fn basis_sampler(domain: Arc<LatticeDomain>) -> Result<BasisSampler> {
    let n = domain.len();
    if n > MAX_BASIS_POINTS {
        return Err(LabError::DomainTooLarge { size: n, limit: MAX_BASIS_POINTS });
    }
    let op = assemble_precision(domain.clone());
    let mut phi = Mat::<f64>::zeros(n, n);
    // psi_j = A φ_j, kept to turn A-inner products into plain dot products
    let mut psi = Mat::<f64>::zeros(n, n);
    let mut v = vec![0.0; n];
    for k in 0..n {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[k] = 1.0;
        // two passes of modified Gram–Schmidt; φ_j is supported on 0..=j
        for _ in 0..2 {
            for j in 0..k {
                let c: f64 = (0..=k).map(|i| v[i] * psi[(i, j)]).sum();
                if c != 0.0 {
                    for i in 0..=j {
                        v[i] -= c * phi[(i, j)];
                    }
                }
            }
        }
        let av = op.apply_alloc(&v);
        let norm2: f64 = v.iter().zip(&av).map(|(x, y)| x * y).sum();
        if norm2 <= 0.0 {
            return Err(LabError::Factorization("degenerate Gram–Schmidt step".into()));
        }
        let s = norm2.sqrt();
        for i in 0..n {
            phi[(i, k)] = v[i] / s;
            psi[(i, k)] = av[i] / s;
        }
    }
    Ok(BasisSampler { domain, basis: phi })
}

impl BasisSampler {
    pub fn domain(&self) -> &Arc<LatticeDomain> {
        &self.domain
    }

    /// `h = Σ_n φ_n Z_n`.
    pub fn sample(&self, stream: &mut RngStream) -> FieldSample {
        let n = self.domain.len();
        let z = stream.normals(n);
        let values = (0..n).map(|i| (i..n).map(|k| self.basis[(i, k)] * z[k]).sum()).collect();
        FieldSample { domain: self.domain.clone(), values, provenance: stream.provenance() }
    }

    /// `max |⟨φ_m, φ_n⟩_Δ − δ_mn|`.
    pub fn gram_defect(&self) -> f64 {
        let a = assemble_precision(self.domain.clone()).to_dense();
        let g = self.basis.transpose() * &a * &self.basis;
        let n = g.nrows();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - want).abs());
            }
        }
        worst
    }

    /// `Σ_n φ_n(x) φ_n(y)` as a matrix.
    pub fn reconstructed_green(&self) -> Mat<f64> {
        &self.basis * self.basis.transpose()
    }
}

/// Maps `U ⊆ V` into `V` and solves the biharmonic extension from `V \ U`.
#[derive(Debug)]
pub struct Extension {
    outer: Arc<PrecisionOperator>,
    embed: Vec<usize>,
    inner: LinearSolver,
}

pub fn prepare_extension(
    outer: Arc<LatticeDomain>,
    inner: Arc<LatticeDomain>,
    opts: &SolverOptions,
) -> Result<Extension> {
    let embed = outer.embedding(&inner)?;
    Ok(Extension {
        outer: Arc::new(assemble_precision(outer)),
        embed,
        inner: green_solver(inner, opts)?,
    })
}

impl Extension {
    pub fn inner_domain(&self) -> &Arc<LatticeDomain> {
        self.inner.operator().domain()
    }

    pub fn outer_domain(&self) -> &Arc<LatticeDomain> {
        self.outer.domain()
    }

    /// `φ_U = −A_UU⁻¹ A_{U,V∖U} h_{V∖U}`; values of `h_v` on `U` are ignored.
    pub fn conditional_mean(&self, h_v: &[f64]) -> Result<Vec<f64>> {
        let mut ext = h_v.to_vec();
        for &i in &self.embed {
            ext[i] = 0.0;
        }
        let ah = self.outer.apply_alloc(&ext);
        let rhs: Vec<f64> = self.embed.iter().map(|&i| -ah[i]).collect();
        Ok(self.inner.solve(&rhs)?.values)
    }

    /// `h` on `V ∖ U` and its conditional mean on `U`.
    pub fn extend(&self, h_v: &[f64]) -> Result<Vec<f64>> {
        let phi = self.conditional_mean(h_v)?;
        let mut out = h_v.to_vec();
        for (&i, v) in self.embed.iter().zip(phi) {
            out[i] = v;
        }
        Ok(out)
    }

    /// `max_{x∈U} |Δ²f(x)|` for `f = extend(h)`.
    pub fn biharmonic_defect(&self, extended: &[f64]) -> f64 {
        let af = self.outer.apply_alloc(extended);
        self.embed.iter().map(|&i| af[i].abs()).fold(0.0, f64::max)
    }

    /// `w` on `V` with `wᵀh = φ_U(x)` for every `h`: `w = −A_{V∖U,U} G^U(·,x)`
    /// off `U`, zero on `U`.
    pub fn point_functional(&self, x: &[i64]) -> Result<Vec<f64>> {
        let col = solve_green_column(&self.inner, x)?;
        let mut g = vec![0.0; self.outer.len()];
        for (&i, v) in self.embed.iter().zip(&col.values) {
            g[i] = *v;
        }
        let mut w = self.outer.apply_alloc(&g);
        for v in w.iter_mut() {
            *v = -*v;
        }
        for &i in &self.embed {
            w[i] = 0.0;
        }
        Ok(w)
    }
}

/// Conditional mean on `U` given values on `V ∖ U` (zero beyond `V`).
pub fn conditional_mean(
    outside_values: &[f64],
    v: Arc<LatticeDomain>,
    u: Arc<LatticeDomain>,
    opts: &SolverOptions,
) -> Result<Vec<f64>> {
    prepare_extension(v, u, opts)?.conditional_mean(outside_values)
}

/// `−A(x,y)/A(x,x)` for every stencil offset `y − x ≠ 0`: the weights of
/// the conditional mean at a single site.
pub fn single_site_coefficients(dim: usize) -> Vec<(Vec<i64>, num_rational::Rational64)> {
    let s = crate::lattice::bilaplacian_stencil(dim);
    let center = s.coefficient(&vec![0; dim]);
    s.entries
        .iter()
        .filter(|(o, _)| o.iter().any(|c| *c != 0))
        .map(|(o, c)| (o.clone(), -*c / center))
        .collect()
}

/// Output of [`gibbs_markov_split`].
#[derive(Clone, Debug)]
pub struct GibbsMarkovSplit {
    /// Field on `U`.
    pub h_u: FieldSample,
    /// `φ^{V,U}` on `V`: the independent outer sample on `V ∖ U` and its
    /// conditional mean on `U`.
    pub phi: FieldSample,
}

impl GibbsMarkovSplit {
    /// `h^U + φ^{V,U}` on `V`, which has the law of `h^V`.
    pub fn recombine(&self) -> Vec<f64> {
        let mut out = self.phi.values.clone();
        for (p, v) in self.h_u.domain.points().zip(&self.h_u.values) {
            if let Some(i) = self.phi.domain.index_of(p) {
                out[i] += v;
            }
        }
        out
    }
}

/// Prepared samplers for repeated Gibbs–Markov splits.
#[derive(Debug)]
pub struct GibbsMarkov {
    outer: FieldSampler,
    inner: FieldSampler,
    ext: Extension,
}

pub fn prepare_gibbs_markov(
    v: Arc<LatticeDomain>,
    u: Arc<LatticeDomain>,
    opts: &SolverOptions,
) -> Result<GibbsMarkov> {
    Ok(GibbsMarkov {
        outer: sampler_for(v.clone(), opts)?,
        inner: sampler_for(u.clone(), opts)?,
        ext: prepare_extension(v, u, opts)?,
    })
}

impl GibbsMarkov {
    pub fn extension(&self) -> &Extension {
        &self.ext
    }

    pub fn split(&self, stream: &mut RngStream) -> Result<GibbsMarkovSplit> {
        let h_u = self.inner.sample(&mut stream.child("inner"))?;
        let outer = self.outer.sample(&mut stream.child("outer"))?;
        let values = self.ext.extend(&outer.values)?;
        Ok(GibbsMarkovSplit {
            h_u,
            phi: FieldSample { domain: outer.domain.clone(), values, provenance: outer.provenance },
        })
    }
}

pub fn gibbs_markov_split(
    v: Arc<LatticeDomain>,
    u: Arc<LatticeDomain>,
    stream: &mut RngStream,
    opts: &SolverOptions,
) -> Result<GibbsMarkovSplit> {
    prepare_gibbs_markov(v, u, opts)?.split(stream)
}

/// `max |G^V − G^U − Cov(φ^{V,U})|` over `V × V`, by dense linear algebra.
///
/// With `K = −A_UU⁻¹ A_{U,W}` (`W = V ∖ U`), `φ_U = K h_W` and `φ_W = h_W`,
/// so `Cov(φ)` is assembled from `G^V_{WW}` and `K` independently of
/// `G^V_{UU}` and `G^V_{UW}`.
pub fn gibbs_markov_covariance_defect(v: Arc<LatticeDomain>, u: Arc<LatticeDomain>) -> Result<f64> {
    let embed = v.embedding(&u)?;
    let nv = v.len();
    let mut in_u = vec![usize::MAX; nv];
    for (k, &i) in embed.iter().enumerate() {
        in_u[i] = k;
    }
    let w_idx: Vec<usize> = (0..nv).filter(|&i| in_u[i] == usize::MAX).collect();
    let (nu, nw) = (embed.len(), w_idx.len());
    let gv = dense_green_matrix(v.clone())?;
    let gu = dense_green_matrix(u)?;
    let op = assemble_precision(v);
    let mut a_uw = Mat::<f64>::zeros(nu, nw);
    let mut w_pos = vec![usize::MAX; nv];
    for (k, &i) in w_idx.iter().enumerate() {
        w_pos[i] = k;
    }
    for (r, &i) in embed.iter().enumerate() {
        for (j, val) in op.row(i) {
            if w_pos[j] != usize::MAX {
                a_uw[(r, w_pos[j])] = val;
            }
        }
    }
    let k = -(&gu * &a_uw);
    let g_ww = Mat::from_fn(nw, nw, |a, b| gv[(w_idx[a], w_idx[b])]);
    let kg = &k * &g_ww;
    let cov_uu = &kg * k.transpose();
    let mut worst = 0.0f64;
    // U × U
    for a in 0..nu {
        for b in 0..nu {
            let d = gv[(embed[a], embed[b])] - gu[(a, b)] - cov_uu[(a, b)];
            worst = worst.max(d.abs());
        }
    }
    // U × W (and W × U by symmetry)
    for a in 0..nu {
        for b in 0..nw {
            worst = worst.max((gv[(embed[a], w_idx[b])] - kg[(a, b)]).abs());
        }
    }
    // W × W: G^U vanishes and φ = h there, so the defect is identically 0
    Ok(worst)
}

/// Values `S_k(x)` for a range of levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseField {
    pub x: LatticePoint,
    pub n_x: usize,
    /// `(k, S_k(x))`.
    pub values: Vec<(usize, f64)>,
}

/// The domain `Δ^k(x) ∩ D_N` as a lattice domain, or `None` when empty.
fn level_domain(h: &BoxHierarchy, k: usize, whole: &Arc<LatticeDomain>) -> Result<Option<Arc<LatticeDomain>>> {
    h.box_domain(k, whole)
}

/// `S_k(x)`: conditional mean at `x` of `h` given its values off `Δ^k(x)`.
pub fn coarse_field(
    h: &FieldSample,
    x: &[i64],
    ks: std::ops::RangeInclusive<usize>,
    opts: &SolverOptions,
) -> Result<CoarseField> {
    let hier = hierarchy(&h.domain, x)?;
    if *ks.end() > hier.n_x {
        return Err(LabError::InvalidParameter(format!(
            "level {} exceeds n(x) = {}",
            ks.end(),
            hier.n_x
        )));
    }
    let xi = h.domain.index_of(x).expect("checked by hierarchy");
    let mut values = Vec::new();
    for k in ks {
        let s = match hier.boxes[k] {
            HierarchyBox::Empty => h.values[xi],
            HierarchyBox::Whole => 0.0,
            HierarchyBox::Ball { .. } => {
                let u = level_domain(&hier, k, &h.domain)?.expect("ball is nonempty");
                let ext = prepare_extension(h.domain.clone(), u.clone(), opts)?;
                let phi = ext.conditional_mean(&h.values)?;
                phi[u.index_of(x).expect("center lies in its ball")]
            }
        };
        values.push((k, s));
    }
    Ok(CoarseField { x: LatticePoint(x.to_vec()), n_x: hier.n_x, values })
}

/// `Λ_r(x) ∩ V` as a domain; `None` if it is all of `V`.
pub fn ball_in_domain(v: &LatticeDomain, x: &[i64], radius: f64) -> Result<Option<Arc<LatticeDomain>>> {
    let (lo, hi) = linf_ball(x, radius);
    let pts: Vec<Vec<i64>> = v
        .points()
        .filter(|p| p.iter().zip(lo.iter().zip(&hi)).all(|(c, (l, h))| l <= c && c <= h))
        .map(|p| p.to_vec())
        .collect();
    if pts.len() == v.len() {
        return Ok(None);
    }
    Ok(Some(Arc::new(LatticeDomain::from_points(v.dim(), pts)?)))
}

/// Coarse field at an explicit radius: the conditional mean at `x` given
/// the field off `Λ_r(x)`. Radius 0 gives `h(x)`; a ball covering `V`
/// gives 0.
pub fn coarse_field_at_radius(h: &FieldSample, x: &[i64], radius: f64, opts: &SolverOptions) -> Result<f64> {
    let xi = h
        .domain
        .index_of(x)
        .ok_or_else(|| LabError::PointOutsideDomain { point: x.to_vec() })?;
    if radius < 0.0 {
        return Ok(h.values[xi]);
    }
    match ball_in_domain(&h.domain, x, radius)? {
        None => Ok(0.0),
        Some(u) => {
            let ext = prepare_extension(h.domain.clone(), u.clone(), opts)?;
            Ok(ext.conditional_mean(&h.values)?[u.index_of(x).expect("center in ball")])
        }
    }
}

/// `w` on `V` with `wᵀh` equal to the coarse field at `x` and radius `r`
/// (negative radius: the point value).
pub fn coarse_functional(v: &Arc<LatticeDomain>, x: &[i64], radius: f64, opts: &SolverOptions) -> Result<Vec<f64>> {
    let xi = v.index_of(x).ok_or_else(|| LabError::PointOutsideDomain { point: x.to_vec() })?;
    if radius < 0.0 {
        let mut w = vec![0.0; v.len()];
        w[xi] = 1.0;
        return Ok(w);
    }
    match ball_in_domain(v, x, radius)? {
        None => Ok(vec![0.0; v.len()]),
        Some(u) => prepare_extension(v.clone(), u, opts)?.point_functional(x),
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"MLFS";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub version: u32,
    pub dim: usize,
    pub descriptor: DomainDescriptor,
    pub len: usize,
    pub provenance: Provenance,
}

/// Writes `path` (binary: header, then little-endian `f64` values in index
/// order) and `path.json` (metadata sidecar).
pub fn write_snapshot(sample: &FieldSample, path: &Path) -> Result<()> {
    let meta = SnapshotMeta {
        version: SNAPSHOT_VERSION,
        dim: sample.domain.dim(),
        descriptor: sample.domain.descriptor().clone(),
        len: sample.values.len(),
        provenance: sample.provenance.clone(),
    };
    let desc = serde_json::to_vec(&meta.descriptor)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(SNAPSHOT_MAGIC)?;
    f.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    f.write_all(&(meta.dim as u32).to_le_bytes())?;
    f.write_all(&(desc.len() as u32).to_le_bytes())?;
    f.write_all(&desc)?;
    f.write_all(&sample.provenance.master_seed.to_le_bytes())?;
    f.write_all(&(sample.values.len() as u64).to_le_bytes())?;
    for v in &sample.values {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    std::fs::write(sidecar(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn read_snapshot(path: &Path) -> Result<FieldSample> {
    let meta: SnapshotMeta = serde_json::from_slice(&std::fs::read(sidecar(path))?)?;
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    f.read_exact(&mut b4)?;
    if &b4 != SNAPSHOT_MAGIC {
        return Err(LabError::InvalidDescriptor("not a field snapshot".into()));
    }
    f.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != SNAPSHOT_VERSION {
        return Err(LabError::SchemaVersion { expected: SNAPSHOT_VERSION, found: version });
    }
    f.read_exact(&mut b4)?;
    f.read_exact(&mut b4)?;
    let mut desc = vec![0u8; u32::from_le_bytes(b4) as usize];
    f.read_exact(&mut desc)?;
    let descriptor: DomainDescriptor = serde_json::from_slice(&desc)?;
    f.read_exact(&mut b8)?;
    f.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        f.read_exact(&mut b8)?;
        values.push(f64::from_le_bytes(b8));
    }
    let domain = Arc::new(LatticeDomain::from_descriptor(&descriptor)?);
    if domain.len() != n {
        return Err(LabError::InvalidDescriptor("payload length does not match the domain".into()));
    }
    Ok(FieldSample { domain, values, provenance: meta.provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::stats::{correlation, ks_normal_test, summarize};
    use crate::lattice::{make_box, make_dyadic_union, DyadicCube};
    use num_rational::Rational64;

    fn dense() -> SolverOptions {
        SolverOptions::dense()
    }

    #[test]
    fn single_point_variance() {
        let s = sampler_for(Arc::new(make_box(4, 2).unwrap()), &dense()).unwrap();
        let xs: Vec<f64> = (0..10_000)
            .map(|r| s.sample(&mut RngStream::new(1, &[format!("{r}")])).unwrap().values[0])
            .collect();
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let m = summarize(&xs).unwrap();
        let v = summarize(&sq).unwrap();
        assert!(m.mean.abs() < 3.0 * m.stderr);
        assert!((v.mean - 8.0 / 9.0).abs() < 3.0 * v.stderr, "{v:?}");
    }

    #[test]
    fn two_point_covariance_both_paths() {
        let dom = Arc::new(LatticeDomain::from_points(1, vec![vec![1], vec![2]]).unwrap());
        for opts in [dense(), SolverOptions::iterative()] {
            let s = sampler_for(dom.clone(), &opts).unwrap();
            let draws: Vec<Vec<f64>> = (0..10_000)
                .map(|r| s.sample(&mut RngStream::new(2, &[format!("{r}")])).unwrap().values)
                .collect();
            let want = [[1.2, 0.8], [0.8, 1.2]];
            for i in 0..2 {
                for j in 0..2 {
                    let p: Vec<f64> = draws.iter().map(|h| h[i] * h[j]).collect();
                    let s = summarize(&p).unwrap();
                    assert!((s.mean - want[i][j]).abs() < 3.0 * s.stderr, "{i}{j} {s:?}");
                }
            }
        }
    }

    #[test]
    fn determinism_and_gaussian_marginal() {
        let s = sampler_for(Arc::new(make_box(2, 5).unwrap()), &dense()).unwrap();
        let a = s.sample(&mut RngStream::new(3, &["x"])).unwrap();
        let b = s.sample(&mut RngStream::new(3, &["x"])).unwrap();
        assert_eq!(a.values, b.values);
        let g = crate::green::dense_green_matrix(s.domain().clone()).unwrap();
        let xs: Vec<f64> = (0..10_000)
            .map(|r| s.sample(&mut RngStream::new(3, &[format!("{r}")])).unwrap().values[7])
            .collect();
        let (_, p) = ks_normal_test(&xs, g[(7, 7)]);
        assert!(p > 0.01, "{p}");
    }

    #[test]
    fn disjoint_union_blocks_are_uncorrelated() {
        // the gap between the cubes is wider than the stencil reach
        let dom = Arc::new(
            make_dyadic_union(&[DyadicCube::new(2, vec![0, 0]), DyadicCube::new(2, vec![2, 0])], 16)
                .unwrap(),
        );
        let s = sampler_for(dom.clone(), &dense()).unwrap();
        let i = dom.index_of(&[2, 2]).unwrap();
        let j = dom.index_of(&[10, 2]).unwrap();
        let draws: Vec<(f64, f64)> = (0..10_000)
            .map(|r| {
                let h = s.sample(&mut RngStream::new(4, &[format!("{r}")])).unwrap();
                (h.values[i], h.values[j])
            })
            .collect();
        let p: Vec<f64> = draws.iter().map(|(a, b)| a * b).collect();
        let s = summarize(&p).unwrap();
        assert!(s.mean.abs() < 3.0 * s.stderr, "{s:?}");
    }

    #[test]
    fn functional_sampler_matches_noise_path() {
        let dom = Arc::new(make_box(3, 6).unwrap());
        let s = sampler_for(dom.clone(), &dense()).unwrap();
        let mut w = vec![0.0; dom.len()];
        w[5] = 1.0;
        w[40] = -0.5;
        let f = s.functional(&w).unwrap();
        let h = s.sample_from_noise(&mut RngStream::new(5, &["z"])).unwrap();
        let direct: f64 = w.iter().zip(&h.values).map(|(a, b)| a * b).sum();
        let via = f.sample(&mut RngStream::new(5, &["z"]));
        assert!((direct - via).abs() < 1e-9);
        let g = crate::green::dense_green_matrix(dom).unwrap();
        let exact = g[(5, 5)] - g[(5, 40)] + 0.25 * g[(40, 40)];
        assert!((f.variance - exact).abs() < 1e-10);
    }

    #[test]
    fn basis_sampler_reconstructs_green() {
        let dom = Arc::new(make_box(3, 5).unwrap());
        let b = basis_sampler(dom.clone()).unwrap();
        assert!(b.gram_defect() < 1e-8);
        let g = crate::green::dense_green_matrix(dom).unwrap();
        let r = b.reconstructed_green();
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                assert!((g[(i, j)] - r[(i, j)]).abs() < 1e-6);
            }
        }
        assert!(matches!(
            basis_sampler(Arc::new(make_box(4, 8).unwrap())),
            Err(LabError::DomainTooLarge { .. })
        ));
    }

    #[test]
    fn conditional_mean_basics() {
        let v = Arc::new(make_box(4, 8).unwrap());
        let u = Arc::new(LatticeDomain::from_points(4, vec![vec![4; 4]]).unwrap());
        let zero = conditional_mean(&vec![0.0; v.len()], v.clone(), u.clone(), &dense()).unwrap();
        assert_eq!(zero, vec![0.0]);
        // the single-site weights reproduce the stencil ratios
        let coeffs = single_site_coefficients(4);
        let ext = prepare_extension(v.clone(), u, &dense()).unwrap();
        for (o, c) in &coeffs {
            let mut h = vec![0.0; v.len()];
            let p: Vec<i64> = o.iter().map(|d| 4 + d).collect();
            h[v.index_of(&p).unwrap()] = 1.0;
            let phi = ext.conditional_mean(&h).unwrap()[0];
            let want = *c.numer() as f64 / *c.denom() as f64;
            assert!((phi - want).abs() < 1e-12);
        }
        let total = coeffs.iter().fold(Rational64::from_integer(0), |a, (_, c)| a + c);
        assert_eq!(total, Rational64::from_integer(1));
        let nn = coeffs.iter().find(|(o, _)| o == &vec![1, 0, 0, 0]).unwrap().1;
        assert_eq!(nn, Rational64::new(2, 9));
    }

    #[test]
    fn conditional_mean_d1_oracle() {
        let v = Arc::new(LatticeDomain::from_points(1, vec![vec![1], vec![2], vec![3]]).unwrap());
        let u = Arc::new(LatticeDomain::from_points(1, vec![vec![2]]).unwrap());
        let phi = conditional_mean(&[1.0, 99.0, 0.0], v, u, &dense()).unwrap();
        // A(2,2) = 3/2, A(2,1) = −1: φ = 1/(3/2) = 2/3
        assert!((phi[0] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn extension_is_biharmonic() {
        let v = Arc::new(make_box(3, 9).unwrap());
        let u = Arc::new(LatticeDomain::region(vec![3; 3], vec![6; 3]).unwrap());
        let ext = prepare_extension(v.clone(), u, &dense()).unwrap();
        let h = sampler_for(v, &dense()).unwrap().sample(&mut RngStream::new(6, &["h"])).unwrap();
        let f = ext.extend(&h.values).unwrap();
        assert!(ext.biharmonic_defect(&f) < 1e-8);
    }

    #[test]
    fn gibbs_markov_exact_identity_small() {
        let v = Arc::new(make_box(3, 7).unwrap());
        let u = Arc::new(LatticeDomain::region(vec![2; 3], vec![5; 3]).unwrap());
        assert!(gibbs_markov_covariance_defect(v.clone(), u).unwrap() < 1e-10);
        let same = gibbs_markov_split(v.clone(), v, &mut RngStream::new(7, &["gm"]), &dense()).unwrap();
        assert!(same.phi.values.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn gibbs_markov_parts_uncorrelated() {
        let v = Arc::new(make_box(2, 9).unwrap());
        let u = Arc::new(LatticeDomain::region(vec![3; 2], vec![6; 2]).unwrap());
        let gm = prepare_gibbs_markov(v, u.clone(), &dense()).unwrap();
        let x = [4, 5];
        let (ui, vi) = (u.index_of(&x).unwrap(), gm.ext.outer_domain().index_of(&x).unwrap());
        let pairs: Vec<(f64, f64)> = (0..10_000)
            .map(|r| {
                let s = gm.split(&mut RngStream::new(8, &[format!("{r}")])).unwrap();
                (s.h_u.values[ui], s.phi.values[vi])
            })
            .collect();
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let c = correlation(&a, &b);
        assert!(c.abs() < 3.0 / 100.0, "{c}");
    }

    #[test]
    fn coarse_field_endpoints() {
        let v = Arc::new(make_box(2, 60).unwrap());
        let s = sampler_for(v, &SolverOptions::default()).unwrap();
        let h = s.sample(&mut RngStream::new(9, &["cf"])).unwrap();
        let x = [30, 30];
        let cf = coarse_field(&h, &x, 0..=2, &SolverOptions::default()).unwrap();
        assert_eq!(cf.n_x, 2);
        assert_eq!(cf.values[0], (0, h.value_at(&x)));
        assert_eq!(cf.values[2], (2, 0.0));
        assert!(coarse_field(&h, &x, 0..=3, &SolverOptions::default()).is_err());
        // the functional form agrees with the direct extension
        let w = coarse_functional(&h.domain, &x, 1f64.exp(), &SolverOptions::default()).unwrap();
        let lin: f64 = w.iter().zip(&h.values).map(|(a, b)| a * b).sum();
        assert!((lin - cf.values[1].1).abs() < 1e-8);
        let r = coarse_field_at_radius(&h, &x, 1f64.exp(), &SolverOptions::default()).unwrap();
        assert_eq!(r, cf.values[1].1);
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.bin");
        let s = sampler_for(Arc::new(make_box(2, 6).unwrap()), &dense()).unwrap();
        let h = s.sample(&mut RngStream::new(10, &["snap"])).unwrap();
        write_snapshot(&h, &path).unwrap();
        let back = read_snapshot(&path).unwrap();
        assert_eq!(back.values, h.values);
        assert_eq!(back.provenance, h.provenance);
        assert_eq!(*back.domain, *h.domain);
    }
}
