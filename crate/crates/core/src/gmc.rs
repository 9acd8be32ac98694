//! The dyadic multiscale measure `Y_m`, spectral partial-sum GMC `μ_n`,
//! the `Z_λ` mean formula and the comparison between the two constructions.
//!
//! Continuum fields are realized on the lattice at a working resolution
//! `N`: a point `z` stands for `z/N`, and every lattice point of a subcube
//! carries an equal share of the subcube volume.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::field::{prepare_extension, sampler_for, Extension, FieldSampler};
use crate::green::{green_diagonal_all, green_solver, lattice_s_values, ContinuumDomain, SField, GAMMA};
use crate::harness::rng::{Provenance, RngStream};
use crate::harness::stats::{ks_statistic, summarize, Summary};
use crate::lattice::{assemble_precision, DyadicCube, LatticeDomain};
use crate::solver::SolverOptions;

/// Largest domain accepted by the dense eigendecomposition.
pub const MAX_SPECTRAL_POINTS: usize = 15_000;

/// `√π/4`.
pub fn z_prefactor() -> f64 {
    PI.sqrt() / 4.0
}

/// `4λ²/γ`, the exponent multiplying `s` in `Y_m` and `Z_λ`.
pub fn s_exponent(lambda: f64) -> f64 {
    4.0 * lambda * lambda / GAMMA
}

/// `S_n` and its `16^m` (in general `2^{dm}`) dyadic descendants `S_{n+m,j}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyadicTree {
    pub base: DyadicCube,
    pub depth: u32,
    pub subcubes: Vec<DyadicCube>,
}

/// The tree below `S_n = (0, 2^{-n})^4`.
pub fn dyadic_tree(n: i32, m: u32) -> DyadicTree {
    DyadicTree::new(DyadicCube::new(n, vec![0; 4]), m)
}

impl DyadicTree {
    pub fn new(base: DyadicCube, depth: u32) -> Self {
        let mut subcubes = vec![base.clone()];
        for _ in 0..depth {
            subcubes = subcubes.iter().flat_map(|c| c.children()).collect();
        }
        DyadicTree { base, depth, subcubes }
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// The same base cube cut `j` times.
    pub fn truncated(&self, j: u32) -> DyadicTree {
        DyadicTree::new(self.base.clone(), j)
    }

    /// `S̃_{n,j}`: the union of the level-`(n+j)` descendants.
    pub fn level_domain(&self, j: u32) -> ContinuumDomain {
        ContinuumDomain::new(self.truncated(j).subcubes)
    }

    /// Lattice points per subcube side at resolution `N`, after checking
    /// that the subcubes align with the grid with at least four cells.
    pub fn cells_per_side(&self, resolution: i64) -> Result<i64> {
        let scale = 1i64 << (self.base.level + self.depth as i32).max(0);
        if self.base.level < 0 || resolution % scale != 0 || resolution / scale < 4 {
            return Err(LabError::InvalidParameter(format!(
                "resolution {resolution} does not give 4 or more aligned cells per side of a level-{} subcube",
                self.base.level + self.depth as i32
            )));
        }
        Ok(resolution / scale)
    }

    /// Index of the subcube containing the lattice point `z` (if any).
    pub fn subcube_of(&self, z: &[i64], resolution: i64) -> Option<usize> {
        let n = resolution as f64;
        let x: Vec<f64> = z.iter().map(|c| *c as f64 / n).collect();
        self.subcubes.iter().position(|c| c.contains(&x))
    }
}

/// `Φ^{S̃_{n,j−1}, S̃_{n,j}}` on the lattice of `S̃_{n,j}`.
#[derive(Clone, Debug)]
pub struct CoarseGaussianLayer {
    pub level: u32,
    pub domain: Arc<LatticeDomain>,
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl CoarseGaussianLayer {
    fn value_at(&self, z: &[i64]) -> Result<f64> {
        self.domain
            .index_of(z)
            .map(|i| self.values[i])
            .ok_or_else(|| LabError::PointOutsideDomain { point: z.to_vec() })
    }
}

/// Samplers on `S̃_{j−1}` and extensions `S̃_{j−1} → S̃_j` for every level.
#[derive(Debug)]
pub struct LayerSampler {
    tree: DyadicTree,
    resolution: i64,
    levels: Vec<(FieldSampler, Extension)>,
}

pub fn prepare_layers(tree: &DyadicTree, resolution: i64, opts: &SolverOptions) -> Result<LayerSampler> {
    tree.cells_per_side(resolution)?;
    let domains: Vec<Arc<LatticeDomain>> = (0..=tree.depth)
        .map(|j| tree.level_domain(j).lattice(resolution).map(Arc::new))
        .collect::<Result<_>>()?;
    let levels = domains
        .windows(2)
        .map(|w| Ok((sampler_for(w[0].clone(), opts)?, prepare_extension(w[0].clone(), w[1].clone(), opts)?)))
        .collect::<Result<_>>()?;
    Ok(LayerSampler { tree: tree.clone(), resolution, levels })
}

impl LayerSampler {
    pub fn tree(&self) -> &DyadicTree {
        &self.tree
    }

    pub fn resolution(&self) -> i64 {
        self.resolution
    }

    /// Layer `j` (1-based) from its own child stream.
    pub fn sample_layer(&self, j: u32, stream: &RngStream) -> Result<CoarseGaussianLayer> {
        let (sampler, ext) = &self.levels[(j - 1) as usize];
        let mut s = stream.child(format!("layer-{j}"));
        let h = sampler.sample(&mut s)?;
        Ok(CoarseGaussianLayer {
            level: j,
            domain: ext.inner_domain().clone(),
            values: ext.conditional_mean(&h.values)?,
            provenance: s.provenance(),
        })
    }

    /// All `m` layers, mutually independent.
    pub fn sample(&self, stream: &RngStream) -> Result<Vec<CoarseGaussianLayer>> {
        (1..=self.tree.depth).map(|j| self.sample_layer(j, stream)).collect()
    }
}

pub fn sample_phi_layers(
    tree: &DyadicTree,
    resolution: i64,
    stream: &RngStream,
    opts: &SolverOptions,
) -> Result<Vec<CoarseGaussianLayer>> {
    prepare_layers(tree, resolution, opts)?.sample(stream)
}

/// `Φ = Σ_j layer_j` at the given points.
pub fn summed_layers(layers: &[CoarseGaussianLayer], points: &LatticeDomain) -> Result<Vec<f64>> {
    points
        .points()
        .map(|z| layers.iter().map(|l| l.value_at(z)).sum())
        .collect()
}

/// `s_{S_{n+m,j}}(z)` at every lattice point of `S̃_{n,m}`, from one
/// subcube solve shifted to each translate.
#[derive(Clone, Debug)]
pub struct SubcubeS {
    pub depth: u32,
    pub resolution: i64,
    pub domain: Arc<LatticeDomain>,
    pub values: Vec<f64>,
}

pub fn subcube_s(tree: &DyadicTree, resolution: i64, opts: &SolverOptions) -> Result<SubcubeS> {
    let side = tree.cells_per_side(resolution)?;
    let reference = ContinuumDomain::new(vec![tree.subcubes[0].clone()]).lattice(resolution)?;
    let s_ref = lattice_s_values(&reference, resolution, opts)?;
    let domain = Arc::new(tree.level_domain(tree.depth).lattice(resolution)?);
    let (lo, _) = reference.bounds();
    let values = domain
        .points()
        .map(|z| {
            let local: Vec<i64> = z.iter().zip(&lo).map(|(c, l)| (c - l).rem_euclid(side) + l).collect();
            reference
                .index_of(&local)
                .map(|i| s_ref[i])
                .ok_or_else(|| LabError::PointOutsideDomain { point: z.to_vec() })
        })
        .collect::<Result<_>>()?;
    Ok(SubcubeS { depth: tree.depth, resolution, domain, values })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GmcKind {
    Ym,
    Spectral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmcMeta {
    pub version: u32,
    pub kind: GmcKind,
    pub resolution: i64,
    pub base: DyadicCube,
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub depth: Option<u32>,
    pub mode_count: Option<usize>,
    pub reweighted: bool,
    pub provenance: Option<Provenance>,
}

const GMC_VERSION: u32 = 1;

/// A measure on the lattice cells of `S_n`: one weight per point.
#[derive(Clone, Debug)]
pub struct GmcMeasure {
    pub domain: Arc<LatticeDomain>,
    pub weights: Vec<f64>,
    pub meta: GmcMeta,
}

impl GmcMeasure {
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Mass of the cells with `z/N ∈ [lo, hi)`.
    pub fn mass_in(&self, lo: &[f64], hi: &[f64]) -> f64 {
        let n = self.meta.resolution as f64;
        self.domain
            .points()
            .zip(&self.weights)
            .filter(|(z, _)| crate::green::in_half_open(z, n, lo, hi))
            .map(|(_, w)| w)
            .sum()
    }

    /// Multiplies each weight by `√π/4 · e^{(4λ²/γ) s_D(z)}`.
    pub fn reweight(&mut self, s: &SField, lambda: f64) -> Result<()> {
        if s.resolution != self.meta.resolution {
            return Err(LabError::InvalidParameter("s field at a different resolution".into()));
        }
        let c = s_exponent(lambda);
        for (z, w) in self.domain.points().zip(self.weights.iter_mut()) {
            let i = s
                .domain
                .index_of(z)
                .ok_or_else(|| LabError::PointOutsideDomain { point: z.to_vec() })?;
            *w *= z_prefactor() * (c * s.values[i]).exp();
        }
        self.meta.reweighted = true;
        self.meta.lambda = Some(lambda);
        Ok(())
    }

    /// CSV rows `(cell, x_1..x_d, weight)` plus a `.json` metadata sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.domain.dim();
        let mut header = vec!["cell".to_string()];
        header.extend((1..=d).map(|a| format!("x{a}")));
        header.push("weight".into());
        w.write_record(&header)?;
        let n = self.meta.resolution as f64;
        for (i, (z, wt)) in self.domain.points().zip(&self.weights).enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(z.iter().map(|c| format!("{:.17e}", *c as f64 / n)));
            row.push(format!("{wt:.17e}"));
            w.write_record(&row)?;
        }
        w.flush()?;
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<GmcMeasure> {
        let meta: GmcMeta = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
        if meta.version != GMC_VERSION {
            return Err(LabError::SchemaVersion { expected: GMC_VERSION, found: meta.version });
        }
        let n = meta.resolution as f64;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for rec in csv::Reader::from_path(path)?.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| LabError::InvalidDescriptor(format!("bad number {s:?}: {e}")))
            };
            let d = rec.len() - 2;
            let z = (1..=d)
                .map(|a| parse(&rec[a]).map(|x| (x * n).round() as i64))
                .collect::<Result<Vec<_>>>()?;
            points.push(z);
            weights.push(parse(&rec[d + 1])?);
        }
        let dim = points.first().map_or(meta.base.dim(), |p| p.len());
        let domain = Arc::new(LatticeDomain::from_points(dim, points)?);
        Ok(GmcMeasure { domain, weights, meta })
    }
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// `Y_m`: cell weight `|cell| · √π/4 · e^{πλΦ(z) + (4λ²/γ) s_{subcube}(z)}`
/// at the lattice points of `S̃_{n,m}`, each holding `|S_{n+m}|/#points`.
pub fn build_ym(
    tree: &DyadicTree,
    layers: &[CoarseGaussianLayer],
    s: &SubcubeS,
    lambda: f64,
) -> Result<GmcMeasure> {
    let m = tree.depth;
    if layers.len() < m as usize || layers.iter().take(m as usize).enumerate().any(|(i, l)| l.level != i as u32 + 1) {
        return Err(LabError::InvalidParameter(format!("need layers 1..={m} for Y_{m}")));
    }
    if s.depth != m {
        return Err(LabError::InvalidParameter(format!(
            "s estimates are for depth {} but the tree has depth {m}",
            s.depth
        )));
    }
    let domain = s.domain.clone();
    let phi = summed_layers(&layers[..m as usize], &domain)?;
    let per_sub = domain.len() / tree.subcubes.len();
    let cell = tree.subcubes[0].volume() / per_sub as f64;
    let (beta, c) = (PI * lambda, s_exponent(lambda));
    let weights = phi
        .iter()
        .zip(&s.values)
        .map(|(p, sv)| cell * z_prefactor() * (beta * p + c * sv).exp())
        .collect();
    Ok(GmcMeasure {
        domain,
        weights,
        meta: GmcMeta {
            version: GMC_VERSION,
            kind: GmcKind::Ym,
            resolution: s.resolution,
            base: tree.base.clone(),
            lambda: Some(lambda),
            beta: Some(beta),
            depth: Some(m),
            mode_count: None,
            reweighted: false,
            provenance: layers.first().map(|l| l.provenance.clone()),
        },
    })
}

/// Exact lattice expectation of the total mass of `Y_m`. The summed layers
/// have variance `G^{D_0}(x,x) − G^{D̃_m}(x,x)` and `½β² = 4λ²/γ`, so
/// `E ⟨Y_m, 1⟩ = √π/4 Σ_x cell · e^{(4λ²/γ)(G^{D_0}(x,x) − G^{D̃_m}(x,x) + s_sub(x))}`.
pub fn ym_exact_mean(tree: &DyadicTree, s: &SubcubeS, base_s: &SField, lambda: f64, opts: &SolverOptions) -> Result<f64> {
    if base_s.resolution != s.resolution {
        return Err(LabError::InvalidParameter("s estimates at different resolutions".into()));
    }
    let shift = GAMMA * (s.resolution as f64).ln();
    let g_union = green_diagonal_all(&green_solver(s.domain.clone(), opts)?)?;
    let per_sub = s.domain.len() / tree.subcubes.len();
    let cell = tree.subcubes[0].volume() / per_sub as f64;
    let c = s_exponent(lambda);
    let mut total = 0.0;
    for ((z, g), sv) in s.domain.points().zip(&g_union).zip(&s.values) {
        let i = base_s.domain.index_of(z).ok_or_else(|| LabError::PointOutsideDomain { point: z.to_vec() })?;
        let var = base_s.values[i] + shift - g;
        total += cell * (c * (var + sv)).exp();
    }
    Ok(z_prefactor() * total)
}

/// `√π/4 ∫_D e^{(4λ²/γ) s_D(x)} dx` by equal-weight quadrature over the
/// lattice points of `D_N`.
pub fn zlambda_mean(d: &ContinuumDomain, lambda: f64, s: &SField) -> Result<f64> {
    let expected = d.lattice(s.resolution)?;
    if expected.len() != s.domain.len() || expected.points().any(|z| !s.domain.contains(z)) {
        return Err(LabError::InsufficientData("s estimates do not cover the lattice of D".into()));
    }
    let c = s_exponent(lambda);
    let mean = s.values.iter().map(|v| (c * v).exp()).sum::<f64>() / s.values.len() as f64;
    Ok(z_prefactor() * d.volume() * mean)
}

/// Eigenvectors of the precision operator, scaled to unit `⟨·,·⟩_Δ` norm
/// and ordered by increasing eigenvalue.
#[derive(Clone, Debug)]
pub struct SpectralBasis {
    pub domain: Arc<LatticeDomain>,
    pub eigenvalues: Vec<f64>,
    /// Column `k` is `f_k`.
    pub modes: Mat<f64>,
}

pub fn spectral_basis(domain: Arc<LatticeDomain>) -> Result<SpectralBasis> {
    let n = domain.len();
    if n > MAX_SPECTRAL_POINTS {
        return Err(LabError::DomainTooLarge { size: n, limit: MAX_SPECTRAL_POINTS });
    }
    let a = assemble_precision(domain.clone()).to_dense();
    let eig = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| LabError::Factorization(format!("eigendecomposition: {e:?}")))?;
    let s = eig.S().column_vector();
    let u = eig.U();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[i].total_cmp(&s[j]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| s[k]).collect();
    if eigenvalues.first().is_some_and(|&v| v <= 0.0) {
        return Err(LabError::Factorization("precision operator is not positive definite".into()));
    }
    let modes = Mat::from_fn(n, n, |i, k| u[(i, order[k])] / eigenvalues[k].sqrt());
    Ok(SpectralBasis { domain, eigenvalues, modes })
}

impl SpectralBasis {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// `Var φ_n(x) = Σ_{k<n} f_k(x)²`.
    pub fn partial_variance(&self, n: usize) -> Vec<f64> {
        (0..self.domain.len())
            .map(|i| (0..n).map(|k| self.modes[(i, k)].powi(2)).sum())
            .collect()
    }

    /// `φ_n = Σ_{k<n} Z_k f_k` for each coefficient vector in `zs`.
    pub fn partial_sums(&self, n: usize, zs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        if zs.is_empty() {
            return Vec::new();
        }
        let z = Mat::from_fn(n, zs.len(), |k, r| zs[r][k]);
        let phi = self.modes.subcols(0, n) * &z;
        (0..zs.len())
            .map(|r| (0..self.domain.len()).map(|i| phi[(i, r)]).collect())
            .collect()
    }
}

/// Where the spectral field comes from: a truncated eigenbasis, or, for
/// all modes, any exact sampler of the full field (same law).
#[derive(Debug)]
pub enum SpectralSource {
    Basis { basis: Arc<SpectralBasis>, mode_count: usize, variance: Vec<f64> },
    Full { sampler: FieldSampler, variance: Vec<f64> },
}

/// Prepared `μ_n^{D,β}` on the lattice of `S_n`.
#[derive(Debug)]
pub struct SpectralGmc {
    base: DyadicCube,
    resolution: i64,
    beta: f64,
    source: SpectralSource,
}

impl SpectralGmc {
    pub fn from_basis(
        basis: Arc<SpectralBasis>,
        base: DyadicCube,
        resolution: i64,
        beta: f64,
        mode_count: usize,
    ) -> Result<Self> {
        if mode_count > basis.len() {
            return Err(LabError::InvalidParameter(format!(
                "mode count {mode_count} exceeds the domain size {}",
                basis.len()
            )));
        }
        let variance = basis.partial_variance(mode_count);
        Ok(SpectralGmc { base, resolution, beta, source: SpectralSource::Basis { basis, mode_count, variance } })
    }

    /// All modes, realized through an exact field sampler and `G(x,x)`.
    pub fn full(base: DyadicCube, resolution: i64, beta: f64, opts: &SolverOptions) -> Result<Self> {
        let domain = Arc::new(ContinuumDomain::new(vec![base.clone()]).lattice(resolution)?);
        let variance = green_diagonal_all(&green_solver(domain.clone(), opts)?)?;
        let sampler = sampler_for(domain, opts)?;
        Ok(SpectralGmc { base, resolution, beta, source: SpectralSource::Full { sampler, variance } })
    }

    pub fn domain(&self) -> &Arc<LatticeDomain> {
        match &self.source {
            SpectralSource::Basis { basis, .. } => &basis.domain,
            SpectralSource::Full { sampler, .. } => sampler.domain(),
        }
    }

    pub fn mode_count(&self) -> usize {
        match &self.source {
            SpectralSource::Basis { mode_count, .. } => *mode_count,
            SpectralSource::Full { sampler, .. } => sampler.domain().len(),
        }
    }

    fn variance(&self) -> &[f64] {
        match &self.source {
            SpectralSource::Basis { variance, .. } | SpectralSource::Full { variance, .. } => variance,
        }
    }

    /// The field `φ_n` for one replica stream.
    pub fn field(&self, stream: &mut RngStream) -> Result<Vec<f64>> {
        Ok(self.fields(std::slice::from_mut(stream))?.remove(0))
    }

    /// Fields for several streams (batched for the eigenbasis).
    pub fn fields(&self, streams: &mut [RngStream]) -> Result<Vec<Vec<f64>>> {
        match &self.source {
            SpectralSource::Basis { basis, mode_count, .. } => {
                let zs: Vec<Vec<f64>> = streams.iter_mut().map(|s| s.normals(*mode_count)).collect();
                Ok(basis.partial_sums(*mode_count, &zs))
            }
            SpectralSource::Full { sampler, .. } => {
                streams.iter_mut().map(|s| sampler.sample(s).map(|h| h.values)).collect()
            }
        }
    }

    /// Weight `|cell| · e^{βφ_n(z) − ½β² Var φ_n(z)}`.
    pub fn measure(&self, phi: &[f64], provenance: Option<Provenance>) -> GmcMeasure {
        let domain = self.domain().clone();
        let cell = self.base.volume() / domain.len() as f64;
        let b = self.beta;
        let weights = phi
            .iter()
            .zip(self.variance())
            .map(|(p, v)| cell * (b * p - 0.5 * b * b * v).exp())
            .collect();
        GmcMeasure {
            domain,
            weights,
            meta: GmcMeta {
                version: GMC_VERSION,
                kind: GmcKind::Spectral,
                resolution: self.resolution,
                base: self.base.clone(),
                lambda: None,
                beta: Some(b),
                depth: None,
                mode_count: Some(self.mode_count()),
                reweighted: false,
                provenance,
            },
        }
    }

    pub fn sample(&self, stream: &mut RngStream) -> Result<GmcMeasure> {
        let phi = self.field(stream)?;
        Ok(self.measure(&phi, Some(stream.provenance())))
    }
}

/// One draw of `μ_n^{S,β}` from a precomputed eigenbasis.
pub fn spectral_gmc(
    basis: Arc<SpectralBasis>,
    base: DyadicCube,
    resolution: i64,
    beta: f64,
    mode_count: usize,
    stream: &mut RngStream,
) -> Result<GmcMeasure> {
    SpectralGmc::from_basis(basis, base, resolution, beta, mode_count)?.sample(stream)
}

/// Mean ratio and two-sample KS distance of total masses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub lambda: f64,
    pub ym: Summary,
    pub spectral: Summary,
    pub mean_ratio: f64,
    /// Delta-method standard error of the ratio.
    pub ratio_stderr: f64,
    pub ks_statistic: f64,
}

pub fn compare_constructions(ym: &[GmcMeasure], spectral: &[GmcMeasure], lambda: f64) -> Result<Comparison> {
    let res = |ms: &[GmcMeasure]| ms.first().map(|m| m.meta.resolution);
    if res(ym) != res(spectral) || ym.iter().chain(spectral).any(|m| Some(m.meta.resolution) != res(ym)) {
        return Err(LabError::InvalidParameter("measures at mismatched resolutions".into()));
    }
    if spectral.iter().any(|m| !m.meta.reweighted) {
        return Err(LabError::InvalidParameter("spectral measures must be reweighted by √π/4·e^{(4λ²/γ)s}".into()));
    }
    let a: Vec<f64> = ym.iter().map(GmcMeasure::total_mass).collect();
    let b: Vec<f64> = spectral.iter().map(GmcMeasure::total_mass).collect();
    let (sa, sb) = (summarize(&a)?, summarize(&b)?);
    let ratio = sa.mean / sb.mean;
    let ratio_stderr = ratio * ((sa.stderr / sa.mean).powi(2) + (sb.stderr / sb.mean).powi(2)).sqrt();
    Ok(Comparison { lambda, mean_ratio: ratio, ratio_stderr, ks_statistic: ks_statistic(&a, &b), ym: sa, spectral: sb })
}

/// Per-subcube comparison of `Y_m` with the average of `Y_{m+1}` over
/// resampled layer `m+1`, layers `1..=m` frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleRow {
    pub subcube: usize,
    /// Mean `Y_m` density over the points of `S̃_{n,m+1}` in the subcube.
    pub coarse: f64,
    /// Conditional average of the same mean for `Y_{m+1}`.
    pub refined: Summary,
}

impl MartingaleRow {
    pub fn z_score(&self) -> f64 {
        (self.refined.mean - self.coarse) / self.refined.stderr
    }
}

/// Both `s` tables must come from [`subcube_s`] at depths `m` and `m+1`.
pub fn martingale_conditional_check(
    layers: &LayerSampler,
    frozen: &[CoarseGaussianLayer],
    s_coarse: &SubcubeS,
    s_fine: &SubcubeS,
    lambda: f64,
    resamples: usize,
    stream: &RngStream,
) -> Result<Vec<MartingaleRow>> {
    let m = frozen.len() as u32;
    if m + 1 > layers.tree.depth || s_coarse.depth != m || s_fine.depth != m + 1 {
        return Err(LabError::InvalidParameter("inconsistent depths for the martingale check".into()));
    }
    let fine = s_fine.domain.clone();
    let coarse_tree = layers.tree.truncated(m);
    let phi_m = summed_layers(frozen, &fine)?;
    let (beta, c) = (PI * lambda, s_exponent(lambda));
    let group: Vec<usize> = fine
        .points()
        .map(|z| coarse_tree.subcube_of(z, layers.resolution).expect("fine points lie in subcubes"))
        .collect();
    let k = coarse_tree.subcubes.len();
    let mut count = vec![0usize; k];
    for g in &group {
        count[*g] += 1;
    }
    let average = |density: &dyn Fn(usize) -> f64| {
        let mut acc = vec![0.0; k];
        for (i, g) in group.iter().enumerate() {
            acc[*g] += density(i);
        }
        acc.iter().zip(&count).map(|(a, n)| a / *n as f64).collect::<Vec<_>>()
    };
    let coarse_s: Vec<f64> = fine
        .points()
        .map(|z| s_coarse.values[s_coarse.domain.index_of(z).expect("nested lattices")])
        .collect();
    let coarse = average(&|i| (beta * phi_m[i] + c * coarse_s[i]).exp());
    let mut draws = vec![Vec::with_capacity(resamples); k];
    for r in 0..resamples {
        let layer = layers.sample_layer(m + 1, &stream.child(format!("resample-{r}")))?;
        let extra = summed_layers(std::slice::from_ref(&layer), &fine)?;
        let refined = average(&|i| (beta * (phi_m[i] + extra[i]) + c * s_fine.values[i]).exp());
        for (d, v) in draws.iter_mut().zip(refined) {
            d.push(v);
        }
    }
    coarse
        .into_iter()
        .zip(draws)
        .enumerate()
        .map(|(j, (c, d))| {
            Ok(MartingaleRow { subcube: j, coarse: z_prefactor() * c, refined: scale(summarize(&d)?, z_prefactor()) })
        })
        .collect()
}

fn scale(s: Summary, k: f64) -> Summary {
    Summary { n: s.n, mean: s.mean * k, stderr: s.stderr * k, ci95: (s.ci95.0 * k, s.ci95.1 * k) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::green::dense_green_matrix;
    use crate::harness::split_stream;
    use crate::harness::stats::variance_with_se;
    use crate::lattice::make_box;

    fn dense() -> SolverOptions {
        SolverOptions::dense()
    }

    #[test]
    fn tree_counts() {
        assert_eq!(dyadic_tree(0, 0).subcubes, vec![DyadicCube::unit(4)]);
        assert_eq!(dyadic_tree(0, 1).subcubes.len(), 16);
        let t = dyadic_tree(1, 2);
        assert_eq!(t.subcubes.len(), 256);
        assert!(t.subcubes.iter().all(|c| c.side() == 0.125));
        let vol: f64 = t.subcubes.iter().map(|c| c.volume()).sum();
        assert_eq!(vol, t.base.volume());
    }

    #[test]
    fn misaligned_resolution_rejected() {
        let t = dyadic_tree(0, 2);
        assert!(t.cells_per_side(12).is_err());
        assert!(t.cells_per_side(8).is_err());
        assert_eq!(t.cells_per_side(16).unwrap(), 4);
    }

    #[test]
    fn depth_zero_has_no_layers() {
        let layers = sample_phi_layers(&dyadic_tree(0, 0), 8, &RngStream::new(1, &["t"]), &dense()).unwrap();
        assert!(layers.is_empty());
    }

    #[test]
    fn lambda_zero_is_lebesgue() {
        let t = dyadic_tree(0, 1);
        let s = subcube_s(&t, 8, &dense()).unwrap();
        let layers = sample_phi_layers(&t, 8, &RngStream::new(2, &["t"]), &dense()).unwrap();
        let y = build_ym(&t, &layers, &s, 0.0).unwrap();
        let per_cell = z_prefactor() / y.domain.len() as f64;
        assert!(y.weights.iter().all(|w| (w - per_cell).abs() < 1e-15));
        assert!((y.total_mass() - z_prefactor()).abs() < 1e-12);
    }

    #[test]
    fn subcube_s_is_translation_invariant() {
        let t = dyadic_tree(0, 1);
        let s = subcube_s(&t, 8, &dense()).unwrap();
        let a = s.values[s.domain.index_of(&[1, 1, 1, 1]).unwrap()];
        let b = s.values[s.domain.index_of(&[5, 1, 7, 5]).unwrap()];
        let c = s.values[s.domain.index_of(&[7, 7, 7, 7]).unwrap()];
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn layer_variance_matches_green_difference() {
        // Var Φ^{S,S̃_1}(z) = G^{S}(z,z) − G^{S̃_1}(z,z).
        let t = dyadic_tree(0, 1);
        let prep = prepare_layers(&t, 8, &dense()).unwrap();
        let big = Arc::new(make_box(4, 8).unwrap());
        let small = Arc::new(t.level_domain(1).lattice(8).unwrap());
        let gb = dense_green_matrix(big.clone()).unwrap();
        let gs = dense_green_matrix(small.clone()).unwrap();
        let probes = [[2, 2, 2, 2], [6, 2, 6, 2], [1, 3, 5, 7]];
        let draws: Vec<Vec<CoarseGaussianLayer>> = (0..1000)
            .map(|r| prep.sample(&split_stream(11, "layers", r, "phi")).unwrap())
            .collect();
        for z in probes {
            let (ib, is) = (big.index_of(&z).unwrap(), small.index_of(&z).unwrap());
            let exact = gb[(ib, ib)] - gs[(is, is)];
            let v: Vec<f64> = draws.iter().map(|l| l[0].value_at(&z).unwrap()).collect();
            let (var, se) = variance_with_se(&v).unwrap();
            assert!((var - exact).abs() < 3.0 * se, "{z:?}: {var} vs {exact} (se {se})");
        }
    }

    #[test]
    fn layers_are_uncorrelated() {
        let t = dyadic_tree(0, 2);
        let prep = prepare_layers(&t, 16, &SolverOptions::default()).unwrap();
        let z = [5, 5, 5, 5];
        let (a, b): (Vec<f64>, Vec<f64>) = (0..300)
            .map(|r| {
                let l = prep.sample(&split_stream(12, "layers", r, "phi")).unwrap();
                (l[0].value_at(&z).unwrap(), l[1].value_at(&z).unwrap())
            })
            .unzip();
        let r = crate::harness::stats::correlation(&a, &b);
        assert!(r.abs() < 3.0 / (300f64).sqrt(), "corr {r}");
    }

    #[test]
    fn zlambda_mean_limits() {
        let d = ContinuumDomain::unit(4);
        let s = SField::compute(&d, 8, &dense()).unwrap();
        assert!((zlambda_mean(&d, 0.0, &s).unwrap() - z_prefactor()).abs() < 1e-14);
        let mut shifted = s.clone();
        let shift = GAMMA * 2f64.ln();
        shifted.values.iter_mut().for_each(|v| *v += shift);
        let (a, b) = (zlambda_mean(&d, 0.4, &s).unwrap(), zlambda_mean(&d, 0.4, &shifted).unwrap());
        assert!((b / a - (s_exponent(0.4) * shift).exp()).abs() < 1e-12);
        let other = SField::compute(&d, 6, &dense()).unwrap();
        assert!(zlambda_mean(&ContinuumDomain::new(dyadic_tree(0, 1).subcubes), 0.3, &other).is_err());
    }

    fn small_basis() -> Arc<SpectralBasis> {
        Arc::new(spectral_basis(Arc::new(make_box(4, 5).unwrap())).unwrap())
    }

    #[test]
    fn spectral_modes_are_orthonormal_and_complete() {
        let b = small_basis();
        assert!(b.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        let a = assemble_precision(b.domain.clone()).to_dense();
        let gram = b.modes.transpose() * &a * &b.modes;
        let n = b.len();
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - want).abs() < 1e-9);
            }
        }
        let g = dense_green_matrix(b.domain.clone()).unwrap();
        let var = b.partial_variance(n);
        for i in 0..n {
            assert!((var[i] - g[(i, i)]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_modes_give_lebesgue() {
        let b = small_basis();
        let base = DyadicCube::unit(4);
        let m = spectral_gmc(b.clone(), base, 5, 1.0, 0, &mut RngStream::new(3, &["t"])).unwrap();
        assert!((m.total_mass() - 1.0).abs() < 1e-14);
        assert!(spectral_gmc(b.clone(), DyadicCube::unit(4), 5, 1.0, b.len() + 1, &mut RngStream::new(3, &["t"])).is_err());
    }

    #[test]
    fn full_basis_density_identity() {
        let b = small_basis();
        let n = b.len();
        let beta = 0.9;
        let g = dense_green_matrix(b.domain.clone()).unwrap();
        let gmc = SpectralGmc::from_basis(b.clone(), DyadicCube::unit(4), 5, beta, n).unwrap();
        let mut st = RngStream::new(4, &["t"]);
        let h = gmc.field(&mut st).unwrap();
        let m = gmc.measure(&h, None);
        let cell = 1.0 / n as f64;
        for i in 0..n {
            let direct = cell * (beta * h[i] - 0.5 * beta * beta * g[(i, i)]).exp();
            assert!((m.weights[i] - direct).abs() <= 1e-10 * direct);
        }
    }

    #[test]
    fn spectral_mass_has_unit_mean() {
        let b = small_basis();
        for k in [5, b.len()] {
            let gmc = SpectralGmc::from_basis(b.clone(), DyadicCube::unit(4), 5, 0.8, k).unwrap();
            let mut streams: Vec<RngStream> = (0..2000).map(|r| split_stream(5, "spectral", r, "z")).collect();
            let masses: Vec<f64> = gmc
                .fields(&mut streams)
                .unwrap()
                .iter()
                .map(|phi| gmc.measure(phi, None).total_mass())
                .collect();
            let s = summarize(&masses).unwrap();
            assert!((s.mean - 1.0).abs() < 3.0 * s.stderr, "k={k}: {s:?}");
        }
    }

    #[test]
    fn ym_mean_matches_exact_expectation() {
        let t = dyadic_tree(0, 1);
        let (n, lambda) = (8, 0.3);
        let s = subcube_s(&t, n, &dense()).unwrap();
        let prep = prepare_layers(&t, n, &dense()).unwrap();
        let sd = SField::compute(&ContinuumDomain::unit(4), n, &dense()).unwrap();
        let exact = ym_exact_mean(&t, &s, &sd, lambda, &dense()).unwrap();
        let lebesgue = ym_exact_mean(&t, &s, &sd, 0.0, &dense()).unwrap();
        assert!((lebesgue - z_prefactor()).abs() < 1e-12);
        let masses: Vec<f64> = (0..1000)
            .map(|r| build_ym(&t, &prep.sample(&split_stream(6, "ym", r, "phi")).unwrap(), &s, lambda).unwrap().total_mass())
            .collect();
        let sm = summarize(&masses).unwrap();
        assert!((sm.mean - exact).abs() < 3.0 * sm.stderr, "{sm:?} vs {exact}");
    }

    #[test]
    fn martingale_check_small() {
        let t = dyadic_tree(0, 1);
        let prep = prepare_layers(&t, 8, &dense()).unwrap();
        let s0 = subcube_s(&t.truncated(0), 8, &dense()).unwrap();
        let s1 = subcube_s(&t, 8, &dense()).unwrap();
        let rows = martingale_conditional_check(&prep, &[], &s0, &s1, 0.3, 400, &RngStream::new(7, &["m"])).unwrap();
        assert_eq!(rows.len(), 1);
        // Exact up to the gap coupling, which is small against 3 SE here.
        assert!(rows[0].z_score().abs() < 3.0, "{:?}", rows[0]);
    }

    #[test]
    fn persistence_roundtrip() {
        let b = small_basis();
        let gmc = SpectralGmc::from_basis(b, DyadicCube::unit(4), 5, 0.5, 7).unwrap();
        let m = gmc.sample(&mut RngStream::new(8, &["p"])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mu.csv");
        m.write(&path).unwrap();
        let back = GmcMeasure::read(&path).unwrap();
        assert_eq!(back.meta, m.meta);
        assert_eq!(back.weights, m.weights);
        assert_eq!(back.domain.points().collect::<Vec<_>>(), m.domain.points().collect::<Vec<_>>());
    }

    #[test]
    fn comparison_requires_reweighting_and_matching_resolution() {
        let b = small_basis();
        let gmc = SpectralGmc::from_basis(b, DyadicCube::unit(4), 5, 0.5, 3).unwrap();
        let ms: Vec<GmcMeasure> = (0..5).map(|r| gmc.sample(&mut split_stream(9, "c", r, "z")).unwrap()).collect();
        assert!(compare_constructions(&ms, &ms, 0.3).is_err());
        let s = SField::compute(&ContinuumDomain::unit(4), 5, &dense()).unwrap();
        let mut rw = ms.clone();
        rw.iter_mut().for_each(|m| m.reweight(&s, 0.3).unwrap());
        let c = compare_constructions(&rw, &rw, 0.3).unwrap();
        assert_eq!(c.mean_ratio, 1.0);
        assert_eq!(c.ks_statistic, 0.0);
    }
}
