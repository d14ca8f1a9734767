//! Reference multilattices, point defects, periodic cells and displacement
//! geometry.
//!
//! All positions live in `Vec3` with unused trailing components set to zero,
//! so one code path serves d = 1, 2 and 3. Cell and period matrices hold
//! lattice vectors in their columns and are padded with the identity beyond
//! the active dimension.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Positions closer than this are treated as the same site.
pub const POSITION_TOL: f64 = 1e-8;

/// Tolerance used when admissibility ratios are compared against the bound.
const ADMISSIBLE_SLACK: f64 = 1e-12;

fn pad_vector(dim: usize, v: &[f64]) -> Result<Vec3> {
    if v.len() != dim {
        return Err(Error::Invalid(format!(
            "expected a vector with {dim} components, got {}",
            v.len()
        )));
    }
    let mut out = Vec3::zeros();
    for (i, x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::Invalid("non-finite coordinate".into()));
        }
        out[i] = *x;
    }
    Ok(out)
}

fn pad_matrix(dim: usize, rows: &[Vec<f64>]) -> Result<Mat3> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Invalid(format!("expected a {dim}x{dim} matrix")));
    }
    let mut m = Mat3::identity();
    for i in 0..dim {
        for j in 0..dim {
            if !rows[i][j].is_finite() {
                return Err(Error::Invalid("non-finite matrix entry".into()));
            }
            m[(i, j)] = rows[i][j];
        }
    }
    Ok(m)
}

fn matrix_rows(dim: usize, m: &Mat3) -> Vec<Vec<f64>> {
    (0..dim).map(|i| (0..dim).map(|j| m[(i, j)]).collect()).collect()
}

fn active(dim: usize, v: &Vec3) -> Vec<f64> {
    v.iter().take(dim).copied().collect()
}

/// Smallest singular value of the active `dim x dim` block.
fn sigma_min(dim: usize, m: &Mat3) -> f64 {
    let block = DMatrix::from_fn(dim, dim, |i, j| m[(i, j)]);
    block
        .singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Iterates all integer vectors with `|a|_inf <= k` in the first `dim` slots,
/// in lexicographic order.
fn for_each_shift(dim: usize, k: i64, mut f: impl FnMut([i64; 3])) {
    let r = |i: usize| if i < dim { -k..=k } else { 0..=0 };
    for a in r(0) {
        for b in r(1) {
            for c in r(2) {
                f([a, b, c]);
            }
        }
    }
}

fn shift_vec(alpha: [i64; 3]) -> Vec3 {
    Vec3::new(alpha[0] as f64, alpha[1] as f64, alpha[2] as f64)
}

// ---------------------------------------------------------------------------
// Reference crystal
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisEntry {
    pub offset: Vec<f64>,
    pub species: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrystalDocument {
    pub dim: usize,
    /// Row-major; the lattice vectors are the columns.
    pub cell_matrix: Vec<Vec<f64>>,
    pub basis: Vec<BasisEntry>,
    #[serde(default = "one")]
    pub orbitals: usize,
}

fn one() -> usize {
    1
}

/// A multilattice `A Z^d + basis` with a fixed number of orbitals per site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CrystalDocument", into = "CrystalDocument")]
pub struct ReferenceCrystal {
    dim: usize,
    cell: Mat3,
    cell_inverse: Mat3,
    basis: Vec<(Vec3, usize)>,
    species: Vec<String>,
    orbitals: usize,
}

impl TryFrom<CrystalDocument> for ReferenceCrystal {
    type Error = Error;

    fn try_from(doc: CrystalDocument) -> Result<Self> {
        let basis = doc
            .basis
            .iter()
            .map(|b| Ok((b.offset.clone(), b.species.clone())))
            .collect::<Result<Vec<_>>>()?;
        ReferenceCrystal::new(doc.dim, &doc.cell_matrix, &basis, doc.orbitals)
    }
}

impl From<ReferenceCrystal> for CrystalDocument {
    fn from(c: ReferenceCrystal) -> Self {
        CrystalDocument {
            dim: c.dim,
            cell_matrix: matrix_rows(c.dim, &c.cell),
            basis: c
                .basis
                .iter()
                .map(|(x, s)| BasisEntry {
                    offset: active(c.dim, x),
                    species: c.species[*s].clone(),
                })
                .collect(),
            orbitals: c.orbitals,
        }
    }
}

impl ReferenceCrystal {
    pub fn new(
        dim: usize,
        cell_rows: &[Vec<f64>],
        basis: &[(Vec<f64>, String)],
        orbitals: usize,
    ) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::Invalid(format!("dimension {dim} not in 1..=3")));
        }
        if orbitals == 0 {
            return Err(Error::Invalid("orbitals per site must be at least 1".into()));
        }
        if basis.is_empty() {
            return Err(Error::Invalid("empty basis".into()));
        }
        let cell = pad_matrix(dim, cell_rows)?;
        let det = cell.determinant();
        if det.abs() < 1e-12 {
            return Err(Error::Singular("cell matrix".into()));
        }
        let cell_inverse = cell
            .try_inverse()
            .ok_or_else(|| Error::Singular("cell matrix".into()))?;
        let mut species: Vec<String> = Vec::new();
        let mut entries = Vec::with_capacity(basis.len());
        for (offset, name) in basis {
            let x = pad_vector(dim, offset)?;
            let id = match species.iter().position(|s| s == name) {
                Some(i) => i,
                None => {
                    species.push(name.clone());
                    species.len() - 1
                }
            };
            entries.push((x, id));
        }
        for i in 0..entries.len() {
            for j in 0..i {
                let diff = entries[i].0 - entries[j].0;
                let frac = cell_inverse * diff;
                let wrapped = frac.map(|v| v - v.round());
                if (cell * wrapped).norm() < POSITION_TOL {
                    return Err(Error::Invalid(format!(
                        "basis offsets {j} and {i} coincide modulo the lattice"
                    )));
                }
            }
        }
        Ok(ReferenceCrystal {
            dim,
            cell,
            cell_inverse,
            basis: entries,
            species,
            orbitals,
        })
    }

    /// Two-species chain with spacing 1: species `A` at 0 and `B` at 1, cell
    /// length 2.
    pub fn two_species_chain() -> Self {
        ReferenceCrystal::new(
            1,
            &[vec![2.0]],
            &[(vec![0.0], "A".into()), (vec![1.0], "B".into())],
            1,
        )
        .expect("valid chain")
    }

    /// Simple lattice with one site of species `A` per cell.
    pub fn simple(dim: usize, spacing: f64) -> Self {
        let rows: Vec<Vec<f64>> = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { spacing } else { 0.0 }).collect())
            .collect();
        ReferenceCrystal::new(dim, &rows, &[(vec![0.0; dim], "A".into())], 1).expect("valid simple lattice")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cell(&self) -> &Mat3 {
        &self.cell
    }

    pub fn orbitals(&self) -> usize {
        self.orbitals
    }

    pub fn basis(&self) -> &[(Vec3, usize)] {
        &self.basis
    }

    pub fn species(&self) -> &[String] {
        &self.species
    }

    pub fn species_id(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s == name)
    }

    fn species_id_or_insert(&mut self, name: &str) -> usize {
        match self.species_id(name) {
            Some(i) => i,
            None => {
                self.species.push(name.to_string());
                self.species.len() - 1
            }
        }
    }

    pub fn site_position(&self, cell: [i64; 3], basis: usize) -> Vec3 {
        self.cell * shift_vec(cell) + self.basis[basis].0
    }

    /// Returns the integer coordinates of `v` if it lies in `A Z^d`.
    pub fn lattice_coordinates(&self, v: &Vec3) -> Option<[i64; 3]> {
        let frac = self.cell_inverse * v;
        let mut out = [0i64; 3];
        for i in 0..self.dim {
            let r = frac[i].round();
            if (frac[i] - r).abs() > 1e-9 {
                return None;
            }
            out[i] = r as i64;
        }
        Some(out)
    }

    /// Locates the reference site at `x`, if there is one.
    pub fn locate(&self, x: &Vec3) -> Option<([i64; 3], usize)> {
        for (b, (offset, _)) in self.basis.iter().enumerate() {
            let frac = self.cell_inverse * (x - offset);
            let mut cell = [0i64; 3];
            for i in 0..self.dim {
                cell[i] = frac[i].round() as i64;
            }
            if (self.site_position(cell, b) - x).norm() < POSITION_TOL {
                return Some((cell, b));
            }
        }
        None
    }

    /// Smallest distance between two distinct reference sites.
    pub fn nearest_neighbor_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, (xi, _)) in self.basis.iter().enumerate() {
            for (j, (xj, _)) in self.basis.iter().enumerate() {
                for_each_shift(self.dim, 2, |g| {
                    if i == j && g == [0, 0, 0] {
                        return;
                    }
                    let r = (self.cell * shift_vec(g) + xj - xi).norm();
                    best = best.min(r);
                });
            }
        }
        best
    }
}

// ---------------------------------------------------------------------------
// Defects
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddedSite {
    pub position: Vec<f64>,
    pub species: String,
}

/// Vacancies and interstitials confined to the ball of radius `radius`
/// around the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectSpec {
    #[serde(default)]
    pub removed: Vec<Vec<f64>>,
    #[serde(default)]
    pub added: Vec<AddedSite>,
    pub radius: f64,
}

impl DefectSpec {
    pub fn vacancy(position: Vec<f64>, radius: f64) -> Self {
        DefectSpec {
            removed: vec![position],
            added: vec![],
            radius,
        }
    }

    /// Removed positions and added (position, species) pairs.
    #[allow(clippy::type_complexity)]
    fn validate(&self, crystal: &ReferenceCrystal) -> Result<(Vec<Vec3>, Vec<(Vec3, String)>)> {
        if !(self.radius > 0.0) {
            return Err(Error::Invalid("defect radius must be positive".into()));
        }
        let dim = crystal.dim();
        let check = |x: &Vec3| -> Result<()> {
            let d = x.norm();
            if d > self.radius + POSITION_TOL {
                return Err(Error::DefectOutsideRadius {
                    distance: d,
                    radius: self.radius,
                });
            }
            Ok(())
        };
        let mut removed = Vec::new();
        for r in &self.removed {
            let x = pad_vector(dim, r)?;
            check(&x)?;
            if crystal.locate(&x).is_none() {
                return Err(Error::Invalid(format!(
                    "removed position {r:?} is not a reference site"
                )));
            }
            removed.push(x);
        }
        let mut added = Vec::new();
        for a in &self.added {
            let x = pad_vector(dim, &a.position)?;
            check(&x)?;
            added.push((x, a.species.clone()));
        }
        Ok((removed, added))
    }

    pub fn positions(&self, dim: usize) -> Result<Vec<Vec3>> {
        self.removed
            .iter()
            .chain(self.added.iter().map(|a| &a.position))
            .map(|p| pad_vector(dim, p))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Configurations and tori
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SiteOrigin {
    Reference { cell: [i64; 3], basis: usize },
    Added(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub position: Vec3,
    pub species: usize,
    pub origin: SiteOrigin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HostKind {
    Cluster,
    Torus,
}

/// Cell-repeat counts for a cluster. Cells run over `0..count` per
/// dimension, or `-count/2..count - count/2` when centred.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub counts: Vec<usize>,
    pub centered: bool,
}

impl Extent {
    pub fn new(counts: Vec<usize>) -> Self {
        Extent {
            counts,
            centered: false,
        }
    }

    pub fn centered(counts: Vec<usize>) -> Self {
        Extent {
            counts,
            centered: true,
        }
    }

    fn range(&self, i: usize) -> std::ops::Range<i64> {
        let n = self.counts[i] as i64;
        if self.centered {
            -(n / 2)..n - n / 2
        } else {
            0..n
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub crystal: ReferenceCrystal,
    pub defect: Option<DefectSpec>,
    pub sites: Vec<Site>,
    pub kind: HostKind,
}

impl Configuration {
    pub fn dim(&self) -> usize {
        self.crystal.dim()
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.sites.iter().map(|s| s.position).collect()
    }

    /// Index of the site at `x`, if any.
    pub fn find(&self, x: &Vec3) -> Option<usize> {
        self.sites
            .iter()
            .position(|s| (s.position - x).norm() < POSITION_TOL)
    }
}

fn assemble_sites(
    crystal: &mut ReferenceCrystal,
    defect: Option<&DefectSpec>,
    mut reference: Vec<([i64; 3], usize)>,
    keep_added: impl Fn(&Vec3) -> bool,
) -> Result<Vec<Site>> {
    let (removed, added) = match defect {
        Some(d) => d.validate(crystal)?,
        None => (vec![], vec![]),
    };
    reference.sort();
    let mut sites: Vec<Site> = reference
        .into_iter()
        .map(|(cell, b)| Site {
            position: crystal.site_position(cell, b),
            species: crystal.basis()[b].1,
            origin: SiteOrigin::Reference { cell, basis: b },
        })
        .filter(|s| !removed.iter().any(|r| (r - s.position).norm() < POSITION_TOL))
        .collect();
    for (i, (x, name)) in added.iter().enumerate() {
        if !keep_added(x) {
            continue;
        }
        let species = crystal.species_id_or_insert(name);
        sites.push(Site {
            position: *x,
            species,
            origin: SiteOrigin::Added(i),
        });
    }
    for i in 0..sites.len() {
        for j in 0..i {
            if (sites[i].position - sites[j].position).norm() < POSITION_TOL {
                return Err(Error::OverlappingSites(j, i));
            }
        }
    }
    Ok(sites)
}

/// Builds a finite cluster of repeated cells with the defect embedded.
///
/// Sites are ordered lexicographically by lattice cell, then basis index,
/// followed by added sites in input order.
pub fn build_configuration(
    crystal: &ReferenceCrystal,
    defect: Option<&DefectSpec>,
    extent: &Extent,
) -> Result<Configuration> {
    let dim = crystal.dim();
    if extent.counts.len() != dim || extent.counts.contains(&0) {
        return Err(Error::Invalid(format!("extent must have {dim} positive entries")));
    }
    let mut reference = Vec::new();
    let r = |i: usize| if i < dim { extent.range(i) } else { 0..1 };
    for a in r(0) {
        for b in r(1) {
            for c in r(2) {
                for basis in 0..crystal.basis().len() {
                    reference.push(([a, b, c], basis));
                }
            }
        }
    }
    let mut crystal = crystal.clone();
    let sites = assemble_sites(&mut crystal, defect, reference, |_| true)?;
    Ok(Configuration {
        crystal,
        defect: defect.cloned(),
        sites,
        kind: HostKind::Cluster,
    })
}

/// Period matrix of a torus together with cached derived quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Periodicity {
    dim: usize,
    matrix: Mat3,
    inverse: Mat3,
    sigma_min: f64,
}

impl Periodicity {
    pub fn new(dim: usize, matrix: Mat3) -> Result<Self> {
        let block_det = DMatrix::from_fn(dim, dim, |i, j| matrix[(i, j)]).determinant();
        if block_det.abs() < 1e-12 {
            return Err(Error::Singular("period matrix".into()));
        }
        let inverse = matrix
            .try_inverse()
            .ok_or_else(|| Error::Singular("period matrix".into()))?;
        Ok(Periodicity {
            dim,
            matrix,
            inverse,
            sigma_min: sigma_min(dim, &matrix),
        })
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fractional(&self, x: &Vec3) -> Vec3 {
        self.inverse * x
    }

    /// Minimal periodic image of `r`, with the achieving integer shift.
    ///
    /// The search window grows until every omitted shift is provably
    /// farther away than the current best.
    pub fn min_image(&self, r: &Vec3) -> (Vec3, [i64; 3]) {
        let frac = self.inverse * r;
        let mut base = [0i64; 3];
        for i in 0..self.dim {
            base[i] = -(frac[i].round() as i64);
        }
        let r0 = r + self.matrix * shift_vec(base);
        let r0_norm = r0.norm();
        let mut best = (r0_norm, r0, [0i64; 3]);
        let mut k = 2;
        loop {
            for_each_shift(self.dim, k, |d| {
                let v = r0 + self.matrix * shift_vec(d);
                let n = v.norm();
                if n < best.0 {
                    best = (n, v, d);
                }
            });
            if self.sigma_min * (k as f64 + 1.0) - r0_norm > best.0 {
                break;
            }
            k += 1;
        }
        let d = best.2;
        (best.1, [base[0] + d[0], base[1] + d[1], base[2] + d[2]])
    }

    /// Calls `f` for every periodic image `r + M alpha` with norm at most
    /// `cutoff`.
    pub fn for_each_image(&self, r: &Vec3, cutoff: f64, mut f: impl FnMut(Vec3, [i64; 3])) {
        let frac = self.inverse * r;
        let mut base = [0i64; 3];
        for i in 0..self.dim {
            base[i] = -(frac[i].round() as i64);
        }
        let r0 = r + self.matrix * shift_vec(base);
        // |r0 + M d| >= sigma_min |d|_2 - |r0|
        let k = ((cutoff + r0.norm()) / self.sigma_min).ceil() as i64;
        for_each_shift(self.dim, k, |d| {
            let v = r0 + self.matrix * shift_vec(d);
            if v.norm() <= cutoff {
                f(v, [base[0] + d[0], base[1] + d[1], base[2] + d[2]]);
            }
        });
    }
}

/// Periodic computational cell `Lambda ∩ Omega_R` with
/// `Omega_R = M_R [-1/2, 1/2)^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusCell {
    pub config: Configuration,
    pub period: Periodicity,
    /// Largest `R` with `B_R ⊂ Omega_R`.
    pub domain_radius: f64,
}

impl TorusCell {
    pub fn len(&self) -> usize {
        self.config.len()
    }

    pub fn is_empty(&self) -> bool {
        self.config.is_empty()
    }
}

const FRACTIONAL_TOL: f64 = 1e-9;

fn in_fundamental_domain(frac: &Vec3, dim: usize) -> bool {
    (0..dim).all(|i| frac[i] >= -0.5 - FRACTIONAL_TOL && frac[i] < 0.5 - FRACTIONAL_TOL)
}

/// Builds the periodic cell for the crystal and defect of `config` with the
/// given period matrix (row-major, columns are periods).
pub fn build_torus(config: &Configuration, period_rows: &[Vec<f64>]) -> Result<TorusCell> {
    let crystal = &config.crystal;
    let dim = crystal.dim();
    let matrix = pad_matrix(dim, period_rows)?;
    let period = Periodicity::new(dim, matrix)?;
    for j in 0..dim {
        let col = Vec3::from_iterator((0..3).map(|i| if i < dim { matrix[(i, j)] } else { 0.0 }));
        if crystal.lattice_coordinates(&col).is_none() {
            return Err(Error::NotALatticeVector(j));
        }
    }
    if let Some(defect) = &config.defect {
        for x in defect.positions(dim)? {
            let frac = period.fractional(&x);
            if (0..dim).any(|i| frac[i].abs() >= 0.5 - FRACTIONAL_TOL) {
                return Err(Error::DefectOnBoundary {
                    position: active(dim, &x),
                });
            }
        }
    }
    // Bounding box of Omega_R in lattice coordinates.
    let to_lattice = crystal.cell.try_inverse().expect("checked at construction") * matrix;
    let mut lo = [0i64; 3];
    let mut hi = [0i64; 3];
    for i in 0..dim {
        let mut extent = 0.0;
        for j in 0..dim {
            extent += 0.5 * to_lattice[(i, j)].abs();
        }
        lo[i] = -(extent.ceil() as i64) - 1;
        hi[i] = extent.ceil() as i64 + 1;
    }
    let mut reference = Vec::new();
    let r = |i: usize| if i < dim { lo[i]..=hi[i] } else { 0..=0 };
    for a in r(0) {
        for b in r(1) {
            for c in r(2) {
                for basis in 0..crystal.basis().len() {
                    let x = crystal.site_position([a, b, c], basis);
                    if in_fundamental_domain(&period.fractional(&x), dim) {
                        reference.push(([a, b, c], basis));
                    }
                }
            }
        }
    }
    let mut crystal = crystal.clone();
    let sites = assemble_sites(&mut crystal, config.defect.as_ref(), reference, |_| true)?;
    let domain_radius = (0..dim)
        .map(|i| {
            let row_norm = (0..dim)
                .map(|j| period.inverse[(i, j)].powi(2))
                .sum::<f64>()
                .sqrt();
            0.5 / row_norm
        })
        .fold(f64::INFINITY, f64::min);
    Ok(TorusCell {
        config: Configuration {
            crystal,
            defect: config.defect.clone(),
            sites,
            kind: HostKind::Torus,
        },
        period,
        domain_radius,
    })
}

// ---------------------------------------------------------------------------
// Geometry abstraction over clusters and tori
// ---------------------------------------------------------------------------

pub trait Geometry: Sync {
    fn configuration(&self) -> &Configuration;

    fn periodicity(&self) -> Option<&Periodicity>;

    fn dim(&self) -> usize {
        self.configuration().dim()
    }

    fn n_sites(&self) -> usize {
        self.configuration().len()
    }

    fn orbitals(&self) -> usize {
        self.configuration().crystal.orbitals()
    }

    /// Reference separation `x_k - x_l`, reduced to the minimal image on
    /// tori.
    fn reference_separation(&self, l: usize, k: usize) -> Vec3 {
        let s = &self.configuration().sites;
        let r = s[k].position - s[l].position;
        match self.periodicity() {
            Some(p) => p.min_image(&r).0,
            None => r,
        }
    }

    /// Calls `f` for every image of the separation `r` within `cutoff`.
    fn for_each_image(&self, r: &Vec3, cutoff: f64, mut f: impl FnMut(Vec3, [i64; 3]))
    where
        Self: Sized,
    {
        match self.periodicity() {
            Some(p) => p.for_each_image(r, cutoff, f),
            None => {
                if r.norm() <= cutoff {
                    f(*r, [0, 0, 0])
                }
            }
        }
    }
}

impl Geometry for Configuration {
    fn configuration(&self) -> &Configuration {
        self
    }

    fn periodicity(&self) -> Option<&Periodicity> {
        None
    }
}

impl Geometry for TorusCell {
    fn configuration(&self) -> &Configuration {
        &self.config
    }

    fn periodicity(&self) -> Option<&Periodicity> {
        Some(&self.period)
    }
}

/// Either kind of host, for callers that decide at run time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Host {
    Cluster(Configuration),
    Torus(TorusCell),
}

impl Geometry for Host {
    fn configuration(&self) -> &Configuration {
        match self {
            Host::Cluster(c) => c,
            Host::Torus(t) => &t.config,
        }
    }

    fn periodicity(&self) -> Option<&Periodicity> {
        match self {
            Host::Cluster(_) => None,
            Host::Torus(t) => Some(&t.period),
        }
    }
}

// ---------------------------------------------------------------------------
// Displacements
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    dim: usize,
    values: Vec<Vec3>,
}

impl Displacement {
    pub fn zeros(n: usize, dim: usize) -> Self {
        Displacement {
            dim,
            values: vec![Vec3::zeros(); n],
        }
    }

    pub fn zeros_for(host: &impl Geometry) -> Self {
        Self::zeros(host.n_sites(), host.dim())
    }

    pub fn uniform(n: usize, dim: usize, c: &[f64]) -> Result<Self> {
        let v = pad_vector(dim, c)?;
        Ok(Displacement {
            dim,
            values: vec![v; n],
        })
    }

    pub fn from_values(dim: usize, values: Vec<Vec3>) -> Result<Self> {
        for v in &values {
            if v.iter().any(|x| !x.is_finite()) || v.iter().skip(dim).any(|x| *x != 0.0) {
                return Err(Error::Invalid(
                    "displacement entries must be finite and live in the active dimensions".into(),
                ));
            }
        }
        Ok(Displacement { dim, values })
    }

    pub fn from_flat(dim: usize, flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(dim) {
            return Err(Error::Invalid("flat displacement length".into()));
        }
        let values = flat
            .chunks(dim)
            .map(|c| pad_vector(dim, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Displacement { dim, values })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values
            .iter()
            .flat_map(|v| v.iter().take(self.dim).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Vec3] {
        &self.values
    }

    pub fn get(&self, i: usize) -> &Vec3 {
        &self.values[i]
    }

    pub fn set(&mut self, i: usize, v: Vec3) {
        self.values[i] = v;
    }

    pub fn scaled(&self, s: f64) -> Self {
        Displacement {
            dim: self.dim,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Displacement {
            dim: self.dim,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Displacement {
            dim: self.dim,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn mean(&self) -> Vec3 {
        if self.values.is_empty() {
            return Vec3::zeros();
        }
        self.values.iter().sum::<Vec3>() / self.values.len() as f64
    }

    /// Removes the mean translation.
    pub fn centered(&self) -> Self {
        let m = self.mean();
        Displacement {
            dim: self.dim,
            values: self.values.iter().map(|v| v - m).collect(),
        }
    }
}

/// Result of a minimal-image distance query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TorusDistance {
    pub distance: f64,
    pub vector: Vec3,
    pub shift: [i64; 3],
}

/// `min_alpha |r_lk(u) + M alpha|` together with the minimiser.
pub fn torus_distance(cell: &TorusCell, u: &Displacement, l: usize, k: usize) -> Result<TorusDistance> {
    let n = cell.len();
    if l >= n || k >= n || u.len() != n {
        return Err(Error::Invalid(format!(
            "site index out of range ({l}, {k}) for {n} sites"
        )));
    }
    // Evaluate in a canonical order so that the result is exactly symmetric.
    let (a, b, sign) = if l <= k { (l, k, 1.0) } else { (k, l, -1.0) };
    let s = &cell.config.sites;
    let r = s[a].position + u.values[a] - s[b].position - u.values[b];
    let (v, shift) = cell.period.min_image(&r);
    Ok(TorusDistance {
        distance: v.norm(),
        vector: v * sign,
        shift: shift.map(|x| if sign < 0.0 { -x } else { x }),
    })
}

// ---------------------------------------------------------------------------
// Stencil seminorm
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeminormConfig {
    pub upsilon: f64,
    /// Stencil radius beyond which weights are dropped.
    pub cutoff: f64,
}

impl SeminormConfig {
    /// Cutoff chosen so that the dropped weights sit below `1e-12` of the
    /// nearest-neighbour weight, with headroom for the growth in site count.
    pub fn new(upsilon: f64, nearest_neighbor: f64) -> Result<Self> {
        if !(upsilon > 0.0) {
            return Err(Error::Invalid("upsilon must be positive".into()));
        }
        Ok(SeminormConfig {
            upsilon,
            cutoff: nearest_neighbor + 35.0 / (2.0 * upsilon),
        })
    }

    pub fn for_crystal(crystal: &ReferenceCrystal) -> Self {
        Self::new(1.0, crystal.nearest_neighbor_distance()).expect("positive upsilon")
    }

    pub fn weight(&self, rho: f64) -> f64 {
        if rho > self.cutoff {
            0.0
        } else {
            (-2.0 * self.upsilon * rho).exp()
        }
    }
}

/// `(sum_l sum_rho e^{-2 Upsilon |rho|} |D_rho u(l)|^2)^{1/2}`.
pub fn stencil_seminorm(host: &impl Geometry, u: &Displacement, cfg: &SeminormConfig) -> f64 {
    stencil_seminorm_on(host, u, cfg, None)
}

/// Seminorm restricted to stencils with both ends in `mask`.
pub fn stencil_seminorm_on(
    host: &impl Geometry,
    u: &Displacement,
    cfg: &SeminormConfig,
    mask: Option<&[bool]>,
) -> f64 {
    let n = host.n_sites();
    let inside = |i: usize| mask.is_none_or(|m| m[i]);
    let mut acc = 0.0;
    for l in 0..n {
        if !inside(l) {
            continue;
        }
        for k in 0..n {
            if k == l || !inside(k) {
                continue;
            }
            let w = cfg.weight(host.reference_separation(l, k).norm());
            if w > 0.0 {
                acc += w * (u.values[k] - u.values[l]).norm_squared();
            }
        }
    }
    acc.sqrt()
}

/// Gram matrix `G` with `v^T G v = ||Dv||^2` over flattened displacements.
pub fn seminorm_gram(host: &impl Geometry, cfg: &SeminormConfig) -> DMatrix<f64> {
    let n = host.n_sites();
    let d = host.dim();
    let mut g = DMatrix::zeros(n * d, n * d);
    for l in 0..n {
        for k in (l + 1)..n {
            // Both orderings of the pair contribute.
            let w = 2.0 * cfg.weight(host.reference_separation(l, k).norm());
            if w == 0.0 {
                continue;
            }
            for i in 0..d {
                let (a, b) = (l * d + i, k * d + i);
                g[(a, a)] += w;
                g[(b, b)] += w;
                g[(a, b)] -= w;
                g[(b, a)] -= w;
            }
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Admissibility
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Admissibility {
    pub admissible: bool,
    /// Pair with the smallest ratio `r_lk(u) / |l - k|`, with that ratio.
    pub worst: Option<(usize, usize, f64)>,
}

/// Checks `r_lk(u) >= m |l - k|` over all pairs, and over all periodic
/// images on tori.
pub fn check_admissible(host: &impl Geometry, u: &Displacement, m: f64) -> Admissibility {
    let sites = &host.configuration().sites;
    let n = sites.len();
    let mut worst: Option<(usize, usize, f64)> = None;
    let mut record = |l: usize, k: usize, ratio: f64| match worst {
        Some((_, _, w)) if w <= ratio => {}
        _ => worst = Some((l, k, ratio)),
    };
    for l in 0..n {
        for k in (l + 1)..n {
            let rho = sites[l].position - sites[k].position;
            let du = u.values[l] - u.values[k];
            match host.periodicity() {
                None => record(l, k, (rho + du).norm() / rho.norm()),
                Some(p) => {
                    let (rho_min, _) = p.min_image(&rho);
                    let span = p
                        .matrix()
                        .column_iter()
                        .take(p.dim())
                        .map(|c| c.norm())
                        .fold(0.0, f64::max);
                    let reach = if m < 1.0 {
                        (du.norm() / (1.0 - m)).min(rho_min.norm() + 2.0 * span)
                    } else {
                        rho_min.norm() + span
                    };
                    let reach = reach.max(rho_min.norm());
                    p.for_each_image(&rho, reach, |img, _| {
                        let ratio = (img + du).norm() / img.norm();
                        record(l, k, ratio);
                    });
                }
            }
        }
    }
    Admissibility {
        admissible: worst.is_none_or(|(_, _, r)| r >= m - ADMISSIBLE_SLACK),
        worst,
    }
}

// ---------------------------------------------------------------------------
// Truncation
// ---------------------------------------------------------------------------

/// Quintic smoothstep cutoff: 1 on `[0, R/2]`, 0 beyond `R`.
pub fn truncation_weight(r: f64, radius: f64) -> f64 {
    let inner = 0.5 * radius;
    if r <= inner {
        1.0
    } else if r >= radius {
        0.0
    } else {
        let s = (r - inner) / (radius - inner);
        1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
    }
}

/// `T_R u`: equal to `u` on `B_{R/2}`, tapered on the annulus, zero outside
/// `B_R`. Radii are measured from the origin of the reference positions.
pub fn truncate(config: &Configuration, u: &Displacement, radius: f64) -> Result<Displacement> {
    let nn = config.crystal.nearest_neighbor_distance();
    if !(radius >= 2.0 * nn) {
        return Err(Error::Invalid(format!(
            "truncation radius {radius} below twice the nearest-neighbour spacing {nn}"
        )));
    }
    if u.len() != config.len() {
        return Err(Error::Invalid("displacement does not match configuration".into()));
    }
    let values = config
        .sites
        .iter()
        .zip(u.values())
        .map(|(s, v)| v * truncation_weight(s.position.norm(), radius))
        .collect();
    Ok(Displacement { dim: u.dim, values })
}

// ---------------------------------------------------------------------------
// JSON geometry document
// ---------------------------------------------------------------------------

/// `{dim, cell_matrix, basis, orbitals, defect, extent | period_matrix}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryDocument {
    pub dim: usize,
    pub cell_matrix: Vec<Vec<f64>>,
    pub basis: Vec<BasisEntry>,
    #[serde(default = "one")]
    pub orbitals: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defect: Option<DefectSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub centered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_matrix: Option<Vec<Vec<f64>>>,
}

impl GeometryDocument {
    pub fn crystal(&self) -> Result<ReferenceCrystal> {
        ReferenceCrystal::try_from(CrystalDocument {
            dim: self.dim,
            cell_matrix: self.cell_matrix.clone(),
            basis: self.basis.clone(),
            orbitals: self.orbitals,
        })
    }

    pub fn build(&self) -> Result<Host> {
        let crystal = self.crystal()?;
        match (&self.extent, &self.period_matrix) {
            (Some(counts), None) => {
                let extent = Extent {
                    counts: counts.clone(),
                    centered: self.centered,
                };
                Ok(Host::Cluster(build_configuration(
                    &crystal,
                    self.defect.as_ref(),
                    &extent,
                )?))
            }
            (None, Some(period)) => {
                let seed = Configuration {
                    crystal,
                    defect: self.defect.clone(),
                    sites: vec![],
                    kind: HostKind::Cluster,
                };
                Ok(Host::Torus(build_torus(&seed, period)?))
            }
            _ => Err(Error::Invalid(
                "exactly one of `extent` and `period_matrix` must be given".into(),
            )),
        }
    }
}

/// Builds a torus of `cells` repeats per dimension (`M_R = A * cells`).
pub fn torus_of_cells(
    crystal: &ReferenceCrystal,
    defect: Option<&DefectSpec>,
    cells: &[i64],
) -> Result<TorusCell> {
    let dim = crystal.dim();
    if cells.len() != dim {
        return Err(Error::Invalid("cells per dimension".into()));
    }
    let a = crystal.cell();
    let rows: Vec<Vec<f64>> = (0..dim)
        .map(|i| (0..dim).map(|j| a[(i, j)] * cells[j] as f64).collect())
        .collect();
    let seed = Configuration {
        crystal: crystal.clone(),
        defect: defect.cloned(),
        sites: vec![],
        kind: HostKind::Cluster,
    };
    build_torus(&seed, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn line() -> ReferenceCrystal {
        ReferenceCrystal::simple(1, 1.0)
    }

    fn xs(c: &Configuration) -> Vec<f64> {
        c.sites.iter().map(|s| s.position[0]).collect()
    }

    #[test]
    fn tiling_in_one_dimension() {
        let c = build_configuration(&line(), None, &Extent::new(vec![4])).unwrap();
        assert_eq!(xs(&c), vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn vacancy_removes_one_site() {
        let defect = DefectSpec::vacancy(vec![1.0], 1.5);
        let c = build_configuration(&line(), Some(&defect), &Extent::new(vec![4])).unwrap();
        assert_eq!(xs(&c), vec![0.0, 2.0, 3.0]);
    }

    #[test]
    fn two_site_basis() {
        let crystal = ReferenceCrystal::new(
            1,
            &[vec![1.0]],
            &[(vec![0.0], "A".into()), (vec![0.5], "B".into())],
            1,
        )
        .unwrap();
        let c = build_configuration(&crystal, None, &Extent::new(vec![2])).unwrap();
        assert_eq!(xs(&c), vec![0.0, 0.5, 1.0, 1.5]);
    }

    #[test]
    fn defect_errors() {
        let far = DefectSpec::vacancy(vec![3.0], 1.0);
        assert!(matches!(
            build_configuration(&line(), Some(&far), &Extent::new(vec![4])),
            Err(Error::DefectOutsideRadius { .. })
        ));
        let overlap = DefectSpec {
            removed: vec![],
            added: vec![AddedSite {
                position: vec![1.0],
                species: "X".into(),
            }],
            radius: 2.0,
        };
        assert!(matches!(
            build_configuration(&line(), Some(&overlap), &Extent::new(vec![4])),
            Err(Error::OverlappingSites(..))
        ));
        let interstitial = DefectSpec {
            removed: vec![],
            added: vec![AddedSite {
                position: vec![0.5],
                species: "X".into(),
            }],
            radius: 2.0,
        };
        let c = build_configuration(&line(), Some(&interstitial), &Extent::new(vec![3])).unwrap();
        assert_eq!(xs(&c), vec![0.0, 1.0, 2.0, 0.5]);
        assert_eq!(c.crystal.species()[c.sites[3].species], "X");
    }

    #[test]
    fn torus_sizes() {
        let seed = build_configuration(&line(), None, &Extent::new(vec![1])).unwrap();
        let ring = build_torus(&seed, &[vec![8.0]]).unwrap();
        assert_eq!(ring.len(), 8);
        assert_relative_eq!(ring.domain_radius, 4.0);

        let sq = ReferenceCrystal::simple(2, 1.0);
        let seed = build_configuration(&sq, None, &Extent::new(vec![1, 1])).unwrap();
        let t = build_torus(&seed, &[vec![4.0, 0.0], vec![0.0, 4.0]]).unwrap();
        assert_eq!(t.len(), 16);

        assert_eq!(
            build_torus(
                &build_configuration(&line(), None, &Extent::new(vec![1])).unwrap(),
                &[vec![8.5]]
            ),
            Err(Error::NotALatticeVector(0))
        );
        assert!(matches!(
            build_torus(&seed, &[vec![4.0, 4.0], vec![1.0, 1.0]]),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn torus_rejects_boundary_defect() {
        let defect = DefectSpec::vacancy(vec![-4.0], 5.0);
        let seed = Configuration {
            crystal: line(),
            defect: Some(defect),
            sites: vec![],
            kind: HostKind::Cluster,
        };
        assert!(matches!(
            build_torus(&seed, &[vec![8.0]]),
            Err(Error::DefectOnBoundary { .. })
        ));
    }

    fn ring8() -> TorusCell {
        torus_of_cells(&line(), None, &[8]).unwrap()
    }

    #[test]
    fn ring_metric() {
        let ring = ring8();
        let u = Displacement::zeros(8, 1);
        let d = torus_distance(&ring, &u, 0, 7).unwrap();
        assert_relative_eq!(d.distance, 1.0);
        assert_eq!(d.shift[0], 1);
        assert_eq!(torus_distance(&ring, &u, 3, 3).unwrap().distance, 0.0);

        let mut u = Displacement::zeros(8, 1);
        u.set(7, Vec3::new(0.25, 0.0, 0.0));
        // Brute force over alpha in {-1, 0, 1}.
        let s = &ring.config.sites;
        let r = s[0].position[0] - s[7].position[0] - 0.25;
        let brute = (-1..=1)
            .map(|a| (r + 8.0 * a as f64).abs())
            .fold(f64::INFINITY, f64::min);
        let d = torus_distance(&ring, &u, 0, 7).unwrap();
        assert_relative_eq!(d.distance, brute, epsilon = 1e-14);
        assert_relative_eq!(d.distance, 0.75, epsilon = 1e-14);
        assert!(torus_distance(&ring, &u, 0, 8).is_err());
    }

    #[test]
    fn seminorm_examples() {
        let c = build_configuration(&line(), None, &Extent::new(vec![2])).unwrap();
        let cfg = SeminormConfig::new(1.0, 1.0).unwrap();
        let u = Displacement::from_flat(1, &[0.0, 1.0]).unwrap();
        assert_relative_eq!(
            stencil_seminorm(&c, &u, &cfg),
            (2.0 * (-2.0f64).exp()).sqrt(),
            epsilon = 1e-15
        );
        let constant = Displacement::uniform(2, 1, &[0.3]).unwrap();
        assert_eq!(stencil_seminorm(&c, &constant, &cfg), 0.0);
        assert_relative_eq!(
            stencil_seminorm(&c, &u.scaled(2.0), &cfg),
            2.0 * stencil_seminorm(&c, &u, &cfg),
            epsilon = 1e-15
        );
        let g = seminorm_gram(&c, &cfg);
        let v = nalgebra::DVector::from_vec(u.to_flat());
        assert_relative_eq!(
            (v.transpose() * &g * &v)[0],
            2.0 * (-2.0f64).exp(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn admissibility_examples() {
        let c = build_configuration(&line(), None, &Extent::new(vec![2])).unwrap();
        let zero = Displacement::zeros(2, 1);
        assert!(check_admissible(&c, &zero, 1.0).admissible);
        let u = Displacement::from_flat(1, &[0.0, -0.8]).unwrap();
        let a = check_admissible(&c, &u, 0.5);
        assert!(!a.admissible);
        let (l, k, ratio) = a.worst.unwrap();
        assert_eq!((l, k), (0, 1));
        assert_relative_eq!(ratio, 0.2, epsilon = 1e-12);

        let ring = ring8();
        let shift = Displacement::uniform(8, 1, &[0.37]).unwrap();
        assert!(check_admissible(&ring, &shift, 1.0).admissible);
        assert!(check_admissible(&ring, &Displacement::zeros(8, 1), 1.0).admissible);
    }

    #[test]
    fn truncation_examples() {
        let c = build_configuration(&line(), None, &Extent::centered(vec![41])).unwrap();
        let n = c.len();
        assert_eq!(
            truncate(&c, &Displacement::zeros(n, 1), 10.0).unwrap(),
            Displacement::zeros(n, 1)
        );
        let inner: Vec<f64> = c
            .sites
            .iter()
            .map(|s| {
                if s.position.norm() <= 5.0 {
                    s.position[0].sin()
                } else {
                    0.0
                }
            })
            .collect();
        let u = Displacement::from_flat(1, &inner).unwrap();
        assert_eq!(truncate(&c, &u, 10.0).unwrap(), u);
        assert!(truncate(&c, &u, 1.5).is_err());

        let decaying: Vec<f64> = c
            .sites
            .iter()
            .map(|s| (1.0 + s.position.norm()).powi(-2))
            .collect();
        let u = Displacement::from_flat(1, &decaying).unwrap();
        let t = truncate(&c, &u, 10.0).unwrap();
        for (l, sl) in c.sites.iter().enumerate() {
            for (k, sk) in c.sites.iter().enumerate() {
                if sl.position.norm() <= 5.0 && sk.position.norm() <= 5.0 {
                    let a = t.get(k) - t.get(l);
                    let b = u.get(k) - u.get(l);
                    assert_eq!(a, b);
                }
            }
            if sl.position.norm() >= 10.0 {
                assert_eq!(t.get(l).norm(), 0.0);
            }
        }
    }

    #[test]
    fn document_round_trip() {
        let json = r#"{"dim":1,"cell_matrix":[[2.0]],
            "basis":[{"offset":[0.0],"species":"A"},{"offset":[1.0],"species":"B"}],
            "defect":{"removed":[[0.0]],"radius":1.0},
            "period_matrix":[[16.0]]}"#;
        let doc: GeometryDocument = serde_json::from_str(json).unwrap();
        let host = doc.build().unwrap();
        assert_eq!(host.n_sites(), 15);
        let back: GeometryDocument = serde_json::from_str(&serde_json::to_string(&doc).unwrap()).unwrap();
        assert_eq!(back, doc);
        let bad = json.replace("\"dim\"", "\"dimension\"");
        assert!(serde_json::from_str::<GeometryDocument>(&bad).is_err());
    }
}
