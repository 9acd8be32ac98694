//! Lattice domains, the normalized Laplacian and bilaplacian stencils, the
//! precision operator of the membrane model, the double boundary and the
//! ℓ∞ box hierarchy around a point.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::sync::Arc;

use num_rational::Rational64;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Padding (in lattice units) around the bounding box of a domain. Two
/// layers are enough for a second-order stencil built from nearest
/// neighbor steps.
const PAD: i64 = 2;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticePoint(pub Vec<i64>);

impl LatticePoint {
    pub fn new(coords: impl Into<Vec<i64>>) -> Self {
        LatticePoint(coords.into())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    pub fn linf_dist(&self, other: &LatticePoint) -> i64 {
        linf(&self.0, &other.0)
    }
}

impl From<&[i64]> for LatticePoint {
    fn from(c: &[i64]) -> Self {
        LatticePoint(c.to_vec())
    }
}

impl fmt::Display for LatticePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

pub(crate) fn linf(a: &[i64], b: &[i64]) -> i64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).max().unwrap_or(0)
}

/// An open dyadic cube `∏ (i_k 2^{-level}, (i_k + 1) 2^{-level})`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DyadicCube {
    pub level: i32,
    pub index: Vec<i64>,
}

impl DyadicCube {
    pub fn new(level: i32, index: impl Into<Vec<i64>>) -> Self {
        DyadicCube { level, index: index.into() }
    }

    /// The unit cube `(0,1)^d`.
    pub fn unit(dim: usize) -> Self {
        DyadicCube::new(0, vec![0; dim])
    }

    pub fn dim(&self) -> usize {
        self.index.len()
    }

    pub fn side(&self) -> f64 {
        2f64.powi(-self.level)
    }

    pub fn lower(&self, axis: usize) -> f64 {
        self.index[axis] as f64 * self.side()
    }

    pub fn upper(&self, axis: usize) -> f64 {
        (self.index[axis] + 1) as f64 * self.side()
    }

    pub fn volume(&self) -> f64 {
        self.side().powi(self.dim() as i32)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dim()).all(|a| x[a] > self.lower(a) && x[a] < self.upper(a))
    }

    /// Open cubes overlap iff their open intervals overlap on every axis.
    pub fn overlaps(&self, other: &DyadicCube) -> bool {
        (0..self.dim()).all(|a| {
            self.lower(a) < other.upper(a) && other.lower(a) < self.upper(a)
        })
    }

    /// The 2^d children one level down.
    pub fn children(&self) -> Vec<DyadicCube> {
        let d = self.dim();
        (0..(1usize << d))
            .map(|mask| {
                let index = (0..d)
                    .map(|a| 2 * self.index[a] + ((mask >> (d - 1 - a)) & 1) as i64)
                    .collect::<Vec<_>>();
                DyadicCube::new(self.level + 1, index)
            })
            .collect()
    }

    /// Lattice range `[lo, hi]` along `axis` at resolution `n`: the integers
    /// `z` with `z/n` inside the cube and ℓ∞ clearance at least one from the
    /// scaled complement. Dyadic endpoints are exact in `f64`.
    pub fn lattice_range(&self, axis: usize, resolution: i64) -> (i64, i64) {
        let n = resolution as f64;
        let lo = (self.lower(axis) * n + 1.0).ceil() as i64;
        let hi = (self.upper(axis) * n - 1.0).floor() as i64;
        (lo, hi)
    }

    /// ℓ∞ distance from `x` to the boundary of the cube (zero outside).
    pub fn boundary_distance(&self, x: &[f64]) -> f64 {
        if !self.contains(x) {
            return 0.0;
        }
        (0..self.dim())
            .map(|a| (x[a] - self.lower(a)).min(self.upper(a) - x[a]))
            .fold(f64::INFINITY, f64::min)
    }
}

/// How a domain was built; serializable as
/// `{dim, kind: "box"|"dyadic_union"|..., side|cubes[], resolution}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainDescriptor {
    Box { dim: usize, side: i64 },
    DyadicUnion { dim: usize, cubes: Vec<DyadicCube>, resolution: i64 },
    /// Inclusive lattice rectangle `[lo, hi]`.
    Region { dim: usize, lo: Vec<i64>, hi: Vec<i64> },
    Points { dim: usize, points: Vec<Vec<i64>> },
}

impl DomainDescriptor {
    pub fn dim(&self) -> usize {
        match self {
            DomainDescriptor::Box { dim, .. }
            | DomainDescriptor::DyadicUnion { dim, .. }
            | DomainDescriptor::Region { dim, .. }
            | DomainDescriptor::Points { dim, .. } => *dim,
        }
    }

    /// Disjoint lattice rectangles making up the domain, if it has that form.
    pub fn rectangles(&self) -> Option<Vec<(Vec<i64>, Vec<i64>)>> {
        match self {
            DomainDescriptor::Box { dim, side } => {
                Some(vec![(vec![1; *dim], vec![side - 1; *dim])])
            }
            DomainDescriptor::DyadicUnion { dim, cubes, resolution } => Some(
                cubes
                    .iter()
                    .map(|c| {
                        let (lo, hi): (Vec<i64>, Vec<i64>) =
                            (0..*dim).map(|a| c.lattice_range(a, *resolution)).unzip();
                        (lo, hi)
                    })
                    .filter(|(lo, hi)| lo.iter().zip(hi).all(|(l, h)| l <= h))
                    .collect(),
            ),
            DomainDescriptor::Region { lo, hi, .. } => Some(vec![(lo.clone(), hi.clone())]),
            DomainDescriptor::Points { .. } => None,
        }
    }

    /// Continuum cubes and resolution, for descriptors that have them.
    pub fn continuum(&self) -> Option<(Vec<DyadicCube>, i64)> {
        match self {
            DomainDescriptor::Box { dim, side } => Some((vec![DyadicCube::unit(*dim)], *side)),
            DomainDescriptor::DyadicUnion { cubes, resolution, .. } => {
                Some((cubes.clone(), *resolution))
            }
            _ => None,
        }
    }
}

/// Padded bounding-box grid with a dense slot map, used for matrix-free
/// stencil application.
#[derive(Clone, Debug)]
pub(crate) struct Grid {
    pub lo: Vec<i64>,
    pub shape: Vec<usize>,
    pub strides: Vec<usize>,
    /// Domain index of each grid cell, or -1.
    pub slot: Vec<i32>,
    /// Grid cell of each domain point.
    pub site: Vec<usize>,
}

impl Grid {
    fn build(dim: usize, coords: &[i64]) -> Grid {
        let n = coords.len() / dim;
        let mut lo = vec![i64::MAX; dim];
        let mut hi = vec![i64::MIN; dim];
        for p in coords.chunks_exact(dim) {
            for a in 0..dim {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        for a in 0..dim {
            lo[a] -= PAD;
            hi[a] += PAD;
        }
        let shape: Vec<usize> = (0..dim).map(|a| (hi[a] - lo[a] + 1) as usize).collect();
        let mut strides = vec![1usize; dim];
        for a in (0..dim.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * shape[a + 1];
        }
        let total = shape.iter().product();
        let mut slot = vec![-1i32; total];
        let mut site = Vec::with_capacity(n);
        for (i, p) in coords.chunks_exact(dim).enumerate() {
            let s = (0..dim).map(|a| (p[a] - lo[a]) as usize * strides[a]).sum::<usize>();
            slot[s] = i as i32;
            site.push(s);
        }
        Grid { lo, shape, strides, slot, site }
    }

    pub fn len(&self) -> usize {
        self.slot.len()
    }

    pub fn cell_of(&self, p: &[i64]) -> Option<usize> {
        let mut s = 0usize;
        for a in 0..p.len() {
            let r = p[a] - self.lo[a];
            if r < 0 || r >= self.shape[a] as i64 {
                return None;
            }
            s += r as usize * self.strides[a];
        }
        Some(s)
    }

    pub fn coords_of(&self, mut cell: usize) -> Vec<i64> {
        let mut c = vec![0; self.shape.len()];
        for a in 0..self.shape.len() {
            c[a] = self.lo[a] + (cell / self.strides[a]) as i64;
            cell %= self.strides[a];
        }
        c
    }

    /// Linear offsets of the 2d nearest neighbors.
    pub fn neighbor_offsets(&self) -> Vec<isize> {
        let d = self.shape.len();
        let mut out = Vec::with_capacity(2 * d);
        for a in 0..d {
            out.push(self.strides[a] as isize);
            out.push(-(self.strides[a] as isize));
        }
        out
    }
}

/// A finite subset of Z^d with a dense index.
///
/// Points are kept in lexicographic order; for a box this coincides with
/// row-major order over the box.
#[derive(Clone, Debug)]
pub struct LatticeDomain {
    dim: usize,
    coords: Vec<i64>,
    descriptor: DomainDescriptor,
    grid: Grid,
}

impl LatticeDomain {
    /// Builds a domain from explicit points; duplicates are rejected.
    pub fn from_points(dim: usize, points: Vec<Vec<i64>>) -> Result<Self> {
        let descriptor = DomainDescriptor::Points { dim, points: points.clone() };
        Self::from_point_list(dim, points, descriptor)
    }

    fn from_point_list(
        dim: usize,
        mut points: Vec<Vec<i64>>,
        descriptor: DomainDescriptor,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(LabError::InvalidParameter("dimension must be at least 1".into()));
        }
        if points.is_empty() {
            return Err(LabError::EmptyDomain(format!("{descriptor:?}")));
        }
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(LabError::InvalidDescriptor(format!(
                "point {p:?} does not have dimension {dim}"
            )));
        }
        points.sort();
        let before = points.len();
        points.dedup();
        if points.len() != before {
            return Err(LabError::InvalidDescriptor("duplicate points".into()));
        }
        let coords: Vec<i64> = points.into_iter().flatten().collect();
        let grid = Grid::build(dim, &coords);
        Ok(LatticeDomain { dim, coords, descriptor, grid })
    }

    fn from_rectangles(
        dim: usize,
        rects: &[(Vec<i64>, Vec<i64>)],
        descriptor: DomainDescriptor,
    ) -> Result<Self> {
        let mut points = Vec::new();
        for (lo, hi) in rects {
            enumerate_rectangle(lo, hi, |p| points.push(p.to_vec()));
        }
        Self::from_point_list(dim, points, descriptor)
    }

    /// Inclusive lattice rectangle `[lo, hi]`.
    pub fn region(lo: Vec<i64>, hi: Vec<i64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(LabError::InvalidDescriptor("corner dimensions differ".into()));
        }
        let dim = lo.len();
        let descriptor = DomainDescriptor::Region { dim, lo: lo.clone(), hi: hi.clone() };
        Self::from_rectangles(dim, &[(lo, hi)], descriptor)
    }

    pub fn from_descriptor(descriptor: &DomainDescriptor) -> Result<Self> {
        match descriptor {
            DomainDescriptor::Box { dim, side } => make_box(*dim, *side),
            DomainDescriptor::DyadicUnion { cubes, resolution, .. } => {
                make_dyadic_union(cubes, *resolution)
            }
            DomainDescriptor::Region { lo, hi, .. } => Self::region(lo.clone(), hi.clone()),
            DomainDescriptor::Points { dim, points } => Self::from_points(*dim, points.clone()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn descriptor(&self) -> &DomainDescriptor {
        &self.descriptor
    }

    pub fn point(&self, i: usize) -> &[i64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[i64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn index_of(&self, p: &[i64]) -> Option<usize> {
        if p.len() != self.dim {
            return None;
        }
        self.grid.cell_of(p).and_then(|c| {
            let s = self.grid.slot[c];
            (s >= 0).then_some(s as usize)
        })
    }

    pub fn contains(&self, p: &[i64]) -> bool {
        self.index_of(p).is_some()
    }

    pub(crate) fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Inclusive bounding box.
    pub fn bounds(&self) -> (Vec<i64>, Vec<i64>) {
        let lo: Vec<i64> = self.grid.lo.iter().map(|l| l + PAD).collect();
        let hi: Vec<i64> = (0..self.dim)
            .map(|a| self.grid.lo[a] + self.grid.shape[a] as i64 - 1 - PAD)
            .collect();
        (lo, hi)
    }

    /// Disjoint lattice rectangles covering the domain, if known.
    pub fn rectangles(&self) -> Option<Vec<(Vec<i64>, Vec<i64>)>> {
        self.descriptor.rectangles().map(|r| {
            r.into_iter()
                .filter(|(lo, hi)| lo.iter().zip(hi).all(|(l, h)| l <= h))
                .collect()
        })
    }

    /// Domain indices of the points of `sub`, which must be a subset.
    pub fn embedding(&self, sub: &LatticeDomain) -> Result<Vec<usize>> {
        sub.points()
            .map(|p| {
                self.index_of(p)
                    .ok_or_else(|| LabError::PointOutsideDomain { point: p.to_vec() })
            })
            .collect()
    }

    /// Nearest-neighbor graph distance of every grid cell to the domain,
    /// capped at `cap + 1`.
    fn graph_distance(&self, cap: u8) -> Vec<u8> {
        let g = &self.grid;
        let mut dist = vec![cap + 1; g.len()];
        let mut frontier: Vec<usize> = g.site.clone();
        for &s in &frontier {
            dist[s] = 0;
        }
        let offs = g.neighbor_offsets();
        for level in 1..=cap {
            let mut next = Vec::new();
            for &s in &frontier {
                for &o in &offs {
                    let t = (s as isize + o) as usize;
                    if dist[t] > level {
                        dist[t] = level;
                        next.push(t);
                    }
                }
            }
            frontier = next;
        }
        dist
    }
}

impl PartialEq for LatticeDomain {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.coords == other.coords
    }
}

fn enumerate_rectangle(lo: &[i64], hi: &[i64], mut f: impl FnMut(&[i64])) {
    let d = lo.len();
    if lo.iter().zip(hi).any(|(l, h)| l > h) {
        return;
    }
    let mut p = lo.to_vec();
    loop {
        f(&p);
        let mut a = d;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            if p[a] < hi[a] {
                p[a] += 1;
                for b in a + 1..d {
                    p[b] = lo[b];
                }
                break;
            }
        }
    }
}

/// `D_N = (0,N)^d ∩ Z^d`.
pub fn make_box(dim: usize, side: i64) -> Result<LatticeDomain> {
    if side < 2 {
        return Err(LabError::EmptyDomain(format!("box side {side} < 2")));
    }
    let descriptor = DomainDescriptor::Box { dim, side };
    LatticeDomain::from_rectangles(dim, &[(vec![1; dim], vec![side - 1; dim])], descriptor)
}

/// Lattice approximation of a finite union of disjoint open dyadic cubes.
pub fn make_dyadic_union(cubes: &[DyadicCube], resolution: i64) -> Result<LatticeDomain> {
    let first = cubes
        .first()
        .ok_or_else(|| LabError::InvalidDescriptor("no cubes".into()))?;
    let dim = first.dim();
    if resolution < 1 {
        return Err(LabError::InvalidParameter(format!("resolution {resolution}")));
    }
    if cubes.iter().any(|c| c.dim() != dim) {
        return Err(LabError::InvalidDescriptor("cubes of mixed dimension".into()));
    }
    for (i, a) in cubes.iter().enumerate() {
        for b in &cubes[i + 1..] {
            if a.overlaps(b) {
                return Err(LabError::InvalidDescriptor(format!(
                    "cubes {a:?} and {b:?} overlap"
                )));
            }
        }
    }
    let descriptor = DomainDescriptor::DyadicUnion {
        dim,
        cubes: cubes.to_vec(),
        resolution,
    };
    let rects = descriptor.rectangles().expect("dyadic unions are rectangular");
    LatticeDomain::from_rectangles(dim, &rects, descriptor)
}

/// Points outside `domain` at nearest-neighbor graph distance 1 or 2.
pub fn boundary2(domain: &LatticeDomain) -> Vec<LatticePoint> {
    let dist = domain.graph_distance(2);
    let g = domain.grid();
    let mut out: Vec<LatticePoint> = dist
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == 1 || d == 2)
        .map(|(c, _)| LatticePoint(g.coords_of(c)))
        .collect();
    out.sort();
    out
}

/// A finite-difference stencil with exact rational coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct Stencil {
    pub dim: usize,
    pub order: u8,
    pub entries: BTreeMap<Vec<i64>, Rational64>,
}

impl Stencil {
    pub fn coefficient(&self, offset: &[i64]) -> Rational64 {
        self.entries.get(offset).copied().unwrap_or_else(|| Rational64::from_integer(0))
    }

    pub fn sum(&self) -> Rational64 {
        self.entries.values().fold(Rational64::from_integer(0), |a, b| a + b)
    }

    /// Convolution of two stencils (composition of the operators).
    pub fn compose(&self, other: &Stencil) -> Stencil {
        let mut entries: BTreeMap<Vec<i64>, Rational64> = BTreeMap::new();
        for (o1, c1) in &self.entries {
            for (o2, c2) in &other.entries {
                let o: Vec<i64> = o1.iter().zip(o2).map(|(a, b)| a + b).collect();
                *entries.entry(o).or_insert_with(|| Rational64::from_integer(0)) += c1 * c2;
            }
        }
        entries.retain(|_, c| *c != Rational64::from_integer(0));
        Stencil { dim: self.dim, order: self.order + other.order, entries }
    }

    pub fn to_f64(&self) -> Vec<(Vec<i64>, f64)> {
        self.entries
            .iter()
            .map(|(o, c)| (o.clone(), *c.numer() as f64 / *c.denom() as f64))
            .collect()
    }
}

/// `Δf(x) = (1/2d) Σ_{y∼x} (f(y) − f(x))`.
pub fn laplacian_stencil(dim: usize) -> Stencil {
    let mut entries = BTreeMap::new();
    entries.insert(vec![0; dim], Rational64::from_integer(-1));
    let w = Rational64::new(1, 2 * dim as i64);
    for a in 0..dim {
        for s in [-1, 1] {
            let mut o = vec![0; dim];
            o[a] = s;
            entries.insert(o, w);
        }
    }
    Stencil { dim, order: 1, entries }
}

/// `Δ²` as the composition of the normalized Laplacian with itself.
pub fn bilaplacian_stencil(dim: usize) -> Stencil {
    let lap = laplacian_stencil(dim);
    lap.compose(&lap)
}

/// Scratch grids for matrix-free application.
#[derive(Clone, Debug)]
pub struct OperatorScratch {
    field: Vec<f64>,
    lap: Vec<f64>,
}

/// The precision matrix `A(x,y) = Δ²(x,y)` on a domain, with the field held
/// at zero outside. Applied matrix-free as `P Δ Δ P`.
#[derive(Clone, Debug)]
pub struct PrecisionOperator {
    domain: Arc<LatticeDomain>,
    stencil: Vec<(Vec<i64>, f64)>,
    neighbors: Vec<isize>,
    /// Grid cells in the domain or adjacent to it: where `Δ` of a field
    /// supported on the domain can be nonzero.
    support: Vec<usize>,
}

impl PrecisionOperator {
    pub fn len(&self) -> usize {
        self.domain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domain.is_empty()
    }

    pub fn domain(&self) -> &Arc<LatticeDomain> {
        &self.domain
    }

    pub fn diagonal_value(&self) -> f64 {
        1.0 + 1.0 / (2.0 * self.domain.dim() as f64)
    }

    pub fn scratch(&self) -> OperatorScratch {
        let n = self.domain.grid().len();
        OperatorScratch { field: vec![0.0; n], lap: vec![0.0; n] }
    }

    /// Applies the normalized Laplacian to the grid field at the support
    /// cells: `out[c] = mean of field over neighbors − field[c]`.
    pub(crate) fn laplacian_on_support(&self, field: &[f64], out: &mut [f64]) {
        let inv = 1.0 / self.neighbors.len() as f64;
        for &c in &self.support {
            let mut s = 0.0;
            for &o in &self.neighbors {
                s += field[(c as isize + o) as usize];
            }
            out[c] = s * inv - field[c];
        }
    }

    /// `y = A x`.
    pub fn apply(&self, x: &[f64], y: &mut [f64], scratch: &mut OperatorScratch) {
        let g = self.domain.grid();
        for (&s, &v) in g.site.iter().zip(x) {
            scratch.field[s] = v;
        }
        self.laplacian_on_support(&scratch.field, &mut scratch.lap);
        let inv = 1.0 / self.neighbors.len() as f64;
        for (i, &c) in g.site.iter().enumerate() {
            let mut s = 0.0;
            for &o in &self.neighbors {
                s += scratch.lap[(c as isize + o) as usize];
            }
            y[i] = s * inv - scratch.lap[c];
        }
        for &s in &g.site {
            scratch.field[s] = 0.0;
        }
    }

    /// Number of cells of `V ∪ ∂₁V`, the support of `ΔP f`.
    pub fn noise_len(&self) -> usize {
        self.support.len()
    }

    /// `(Δ P x)` listed over `V ∪ ∂₁V`.
    pub fn laplacian_to_support(&self, x: &[f64]) -> Vec<f64> {
        let g = self.domain.grid();
        let mut field = vec![0.0; g.len()];
        for (&s, &v) in g.site.iter().zip(x) {
            field[s] = v;
        }
        let mut lap = vec![0.0; g.len()];
        self.laplacian_on_support(&field, &mut lap);
        self.support.iter().map(|&c| lap[c]).collect()
    }

    /// `P Δ z` for `z` given over `V ∪ ∂₁V` (zero elsewhere). With `z`
    /// white noise this has covariance `A`.
    pub fn laplacian_from_support(&self, z: &[f64], scratch: &mut OperatorScratch) -> Vec<f64> {
        let g = self.domain.grid();
        for (&c, &v) in self.support.iter().zip(z) {
            scratch.field[c] = v;
        }
        let inv = 1.0 / self.neighbors.len() as f64;
        let out = g
            .site
            .iter()
            .map(|&c| {
                let s: f64 = self.neighbors.iter().map(|&o| scratch.field[(c as isize + o) as usize]).sum();
                s * inv - scratch.field[c]
            })
            .collect();
        for &c in &self.support {
            scratch.field[c] = 0.0;
        }
        out
    }

    /// `y = A x` with a fresh scratch buffer.
    pub fn apply_alloc(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.len()];
        let mut scratch = self.scratch();
        self.apply(x, &mut y, &mut scratch);
        y
    }

    /// Entry `A(i, j)` between domain indices.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let d = self.domain.dim();
        let off: Vec<i64> = (0..d).map(|a| self.domain.point(j)[a] - self.domain.point(i)[a]).collect();
        self.stencil
            .iter()
            .find(|(o, _)| *o == off)
            .map(|(_, c)| *c)
            .unwrap_or(0.0)
    }

    /// Row `i` as `(column, value)` pairs.
    pub fn row(&self, i: usize) -> Vec<(usize, f64)> {
        let p = self.domain.point(i);
        let mut q = p.to_vec();
        let mut out = Vec::with_capacity(self.stencil.len());
        for (o, c) in &self.stencil {
            for a in 0..q.len() {
                q[a] = p[a] + o[a];
            }
            if let Some(j) = self.domain.index_of(&q) {
                out.push((j, *c));
            }
        }
        out.sort_by_key(|(j, _)| *j);
        out
    }

    /// Explicit sparse export as `(row, col, value)` triplets.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.len())
            .flat_map(|i| self.row(i).into_iter().map(move |(j, v)| (i, j, v)))
            .collect()
    }

    /// Dense copy, for small domains.
    pub fn to_dense(&self) -> faer::Mat<f64> {
        let n = self.len();
        let mut m = faer::Mat::<f64>::zeros(n, n);
        for i in 0..n {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }
}

pub fn assemble_precision(domain: Arc<LatticeDomain>) -> PrecisionOperator {
    let stencil = bilaplacian_stencil(domain.dim()).to_f64();
    let neighbors = domain.grid().neighbor_offsets();
    let dist = domain.graph_distance(1);
    let support = dist
        .iter()
        .enumerate()
        .filter(|(_, &d)| d <= 1)
        .map(|(c, _)| c)
        .collect();
    PrecisionOperator { domain, stencil, neighbors, support }
}

/// `Λ_r(x) ∩ Z^d` for real radius `r`, with membership `‖z − x‖∞ ≤ ⌊r⌋`.
pub fn linf_ball(x: &[i64], radius: f64) -> (Vec<i64>, Vec<i64>) {
    let r = radius.floor() as i64;
    (x.iter().map(|c| c - r).collect(), x.iter().map(|c| c + r).collect())
}

fn rectangle_inside(domain: &LatticeDomain, lo: &[i64], hi: &[i64]) -> bool {
    let mut inside = true;
    enumerate_rectangle(lo, hi, |p| inside &= domain.contains(p));
    inside
}

/// One level of the box hierarchy around a point.
#[derive(Clone, Debug, PartialEq)]
pub enum HierarchyBox {
    Empty,
    /// `Λ_{⌊e^k⌋}(x)` as an inclusive rectangle.
    Ball { lo: Vec<i64>, hi: Vec<i64> },
    Whole,
}

/// The boxes `Δ^k(x)`, `k = 0..=n(x)`, around a point of a domain.
#[derive(Clone, Debug)]
pub struct BoxHierarchy {
    pub center: LatticePoint,
    pub n_x: usize,
    pub boxes: Vec<HierarchyBox>,
}

impl BoxHierarchy {
    /// Points of `Δ^k(x)` as a domain (`None` for the empty box).
    pub fn box_domain(&self, k: usize, whole: &Arc<LatticeDomain>) -> Result<Option<Arc<LatticeDomain>>> {
        match self.boxes.get(k) {
            None => Err(LabError::Precondition(format!("level {k} exceeds n(x) = {}", self.n_x))),
            Some(HierarchyBox::Empty) => Ok(None),
            Some(HierarchyBox::Whole) => Ok(Some(whole.clone())),
            Some(HierarchyBox::Ball { lo, hi }) => {
                Ok(Some(Arc::new(LatticeDomain::region(lo.clone(), hi.clone())?)))
            }
        }
    }

    /// Number of lattice points in `Δ^k(x)`.
    pub fn box_size(&self, k: usize, whole: &LatticeDomain) -> usize {
        match &self.boxes[k] {
            HierarchyBox::Empty => 0,
            HierarchyBox::Whole => whole.len(),
            HierarchyBox::Ball { lo, hi } => {
                lo.iter().zip(hi).map(|(l, h)| (h - l + 1) as usize).product()
            }
        }
    }
}

/// `n(x) = max{n ≥ 0 : Λ_{e^{n+1}}(x) ⊂ D_N}` and the boxes `Δ^k(x)`.
///
/// `Δ^0 = ∅`; `Δ^{n(x)} = D_N` when `n(x) ≥ 1` (when `n(x) = 0` the
/// single level is the empty box). Points where not even `Λ_e(x)` fits get
/// `n(x) = 0`.
pub fn hierarchy(domain: &LatticeDomain, x: &[i64]) -> Result<BoxHierarchy> {
    if !domain.contains(x) {
        return Err(LabError::PointOutsideDomain { point: x.to_vec() });
    }
    let mut n_x: Option<usize> = None;
    for n in 0.. {
        let (lo, hi) = linf_ball(x, ((n + 1) as f64).exp());
        if rectangle_inside(domain, &lo, &hi) {
            n_x = Some(n);
        } else {
            break;
        }
    }
    // no admissible n near the boundary: take n(x) = 0
    let n_x = n_x.unwrap_or(0);
    let mut boxes = Vec::with_capacity(n_x + 1);
    boxes.push(HierarchyBox::Empty);
    for k in 1..=n_x {
        if k == n_x {
            boxes.push(HierarchyBox::Whole);
        } else {
            let (lo, hi) = linf_ball(x, (k as f64).exp());
            boxes.push(HierarchyBox::Ball { lo, hi });
        }
    }
    Ok(BoxHierarchy { center: LatticePoint(x.to_vec()), n_x, boxes })
}

/// Orbit representatives under the symmetries of the bounding box that
/// preserve the domain (axis reflections and, where the box is a cube,
/// axis permutations). Returns `(representative, orbit)` pairs.
pub fn symmetry_orbits(domain: &LatticeDomain) -> Vec<(usize, Vec<usize>)> {
    let (lo, hi) = domain.bounds();
    let d = domain.dim();
    let reflect_ok = (0..d).all(|a| {
        domain.points().all(|p| {
            let mut q = p.to_vec();
            q[a] = lo[a] + hi[a] - p[a];
            domain.contains(&q)
        })
    });
    let extents: BTreeSet<i64> = (0..d).map(|a| hi[a] - lo[a]).collect();
    let cube = extents.len() == 1 && lo.iter().collect::<HashSet<_>>().len() == 1;
    let permute_ok = cube
        && domain.points().all(|p| {
            let mut q = p.to_vec();
            q.sort();
            domain.contains(&q)
        });
    let key = |p: &[i64]| -> Vec<i64> {
        let mut k: Vec<i64> = (0..d)
            .map(|a| {
                if reflect_ok {
                    (p[a] - lo[a]).min(hi[a] - p[a])
                } else {
                    p[a] - lo[a]
                }
            })
            .collect();
        if permute_ok && reflect_ok {
            k.sort();
        }
        k
    };
    let mut orbits: BTreeMap<Vec<i64>, Vec<usize>> = BTreeMap::new();
    for (i, p) in domain.points().enumerate() {
        orbits.entry(key(p)).or_default().push(i);
    }
    orbits.into_values().map(|o| (o[0], o)).collect()
}
