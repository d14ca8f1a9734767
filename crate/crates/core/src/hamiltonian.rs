//! Hopping models and assembly of cluster, torus and Bloch Hamiltonians with
//! their analytic displacement derivatives.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{check_admissible, Displacement, Geometry, Periodicity, ReferenceCrystal, Vec3};

/// Septic smoothstep cutoff: 1 below `cutoff - width`, 0 beyond `cutoff`,
/// three times continuously differentiable. Returns the value and the
/// derivative in `r`.
pub fn taper(r: f64, cutoff: f64, width: f64) -> (f64, f64) {
    let start = cutoff - width;
    if r <= start {
        (1.0, 0.0)
    } else if r >= cutoff {
        (0.0, 0.0)
    } else {
        let s = (r - start) / width;
        let s3 = s * s * s;
        let v = s3 * s * (35.0 + s * (-84.0 + s * (70.0 - 20.0 * s)));
        let dv = 140.0 * s3 * (1.0 - s).powi(3);
        (1.0 - v, -dv / width)
    }
}

/// Onsite energy of a species, scalar or one value per orbital.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Onsite {
    Scalar(f64),
    PerOrbital(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairPotential {
    pub amplitude: f64,
    pub alpha: f64,
    pub r0: f64,
    pub cutoff: f64,
    pub taper_width: f64,
}

impl PairPotential {
    /// `phi(r) = A e^{-alpha (r - r0)} taper(r)` and its derivative.
    pub fn eval(&self, r: f64) -> (f64, f64) {
        if r >= self.cutoff {
            return (0.0, 0.0);
        }
        let e = self.amplitude * (-self.alpha * (r - self.r0)).exp();
        let (tv, td) = taper(r, self.cutoff, self.taper_width);
        (e * tv, e * (td - self.alpha * tv))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "exp-hop")]
    ExpHop,
}

/// `h^{ab}(xi) = -t C_ab e^{-gamma0 (|xi| - r0)} taper(|xi|)` with species
/// onsite energies and an optional repulsive pair term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoppingModel {
    pub family: Family,
    pub t: f64,
    pub gamma0: f64,
    pub r0: f64,
    pub r_cut: f64,
    #[serde(default = "default_taper_width")]
    pub taper_width: f64,
    pub onsite: BTreeMap<String, Onsite>,
    #[serde(rename = "Nb", default = "default_nb")]
    pub nb: usize,
    /// Symmetric orbital coupling `C`; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orbital_coupling: Option<Vec<Vec<f64>>>,
    /// Admissibility constant required of every displacement.
    #[serde(default = "default_admissibility")]
    pub admissibility: f64,
    /// Repulsive pair terms, summed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pair: Vec<PairPotential>,
}

fn default_taper_width() -> f64 {
    0.4
}

fn default_nb() -> usize {
    1
}

fn default_admissibility() -> f64 {
    0.5
}

/// Differentiability order of the hopping functions.
pub const SMOOTHNESS: usize = 3;

impl HoppingModel {
    /// Two-species chain insulator: onsite -1 (A) and +1 (B), hopping 0.5 at
    /// unit spacing with second-neighbour tails, a stiff nearest-neighbour
    /// repulsion and a soft second-neighbour one. The latter couples the two
    /// sides of a vacancy.
    pub fn default_insulator() -> Self {
        let mut onsite = BTreeMap::new();
        onsite.insert("A".into(), Onsite::Scalar(-1.0));
        onsite.insert("B".into(), Onsite::Scalar(1.0));
        HoppingModel {
            family: Family::ExpHop,
            t: 0.5,
            gamma0: 2.0,
            r0: 1.0,
            r_cut: 2.6,
            taper_width: 0.4,
            onsite,
            nb: 1,
            orbital_coupling: None,
            admissibility: 0.5,
            pair: vec![
                PairPotential {
                    amplitude: 0.095345,
                    alpha: 8.0,
                    r0: 1.0,
                    cutoff: 1.6,
                    taper_width: 0.4,
                },
                PairPotential {
                    amplitude: 0.05,
                    alpha: 2.0,
                    r0: 2.0,
                    cutoff: 2.6,
                    taper_width: 0.4,
                },
            ],
        }
    }

    /// Nearest-neighbour-only variant of the chain (cutoff 1.6, no pair
    /// term), whose bands are `±sqrt(eps0^2 + 2t^2 (1 + cos xi))`.
    pub fn nearest_neighbor_chain() -> Self {
        HoppingModel {
            r_cut: 1.6,
            pair: vec![],
            ..Self::default_insulator()
        }
    }

    /// Single-species nearest-neighbour model with hopping `-t` at unit
    /// spacing and zero onsite energy.
    pub fn simple_nearest_neighbor(t: f64, r_cut: f64) -> Self {
        let mut onsite = BTreeMap::new();
        onsite.insert("A".into(), Onsite::Scalar(0.0));
        HoppingModel {
            family: Family::ExpHop,
            t,
            gamma0: 2.0,
            r0: 1.0,
            r_cut,
            taper_width: (r_cut - 1.0).min(0.4) * 0.999,
            onsite,
            nb: 1,
            orbital_coupling: None,
            admissibility: 0.5,
            pair: vec![],
        }
    }

    pub fn validate(&self, crystal: &ReferenceCrystal) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if !(self.gamma0 > 0.0) || !self.t.is_finite() || !self.r0.is_finite() {
            return bad("model needs finite t, r0 and gamma0 > 0");
        }
        if !(self.r_cut > 0.0) || !(self.taper_width > 0.0) || self.taper_width > self.r_cut {
            return bad("model needs 0 < taper_width <= r_cut");
        }
        if !(self.admissibility > 0.0 && self.admissibility <= 1.0) {
            return bad("admissibility constant must lie in (0, 1]");
        }
        if self.nb != crystal.orbitals() {
            return bad("model Nb differs from the crystal's orbital count");
        }
        if let Some(c) = &self.orbital_coupling {
            if c.len() != self.nb || c.iter().any(|r| r.len() != self.nb) {
                return bad("orbital_coupling must be Nb x Nb");
            }
            for a in 0..self.nb {
                for b in 0..self.nb {
                    if c[a][b] != c[b][a] {
                        return bad("orbital_coupling must be symmetric");
                    }
                }
            }
        }
        for name in crystal.species() {
            match self.onsite.get(name) {
                None => return bad(&format!("no onsite energy for species {name}")),
                Some(Onsite::PerOrbital(v)) if v.len() != self.nb => {
                    return bad(&format!("onsite for {name} needs {} values", self.nb))
                }
                _ => {}
            }
        }
        for p in &self.pair {
            if !(p.cutoff > 0.0 && p.taper_width > 0.0 && p.taper_width <= p.cutoff) {
                return bad("pair potential needs 0 < taper_width <= cutoff");
            }
        }
        Ok(())
    }

    /// Summed pair potential and its derivative.
    pub fn pair_eval(&self, r: f64) -> (f64, f64) {
        self.pair.iter().fold((0.0, 0.0), |(v, d), p| {
            let (pv, pd) = p.eval(r);
            (v + pv, d + pd)
        })
    }

    pub fn coupling(&self, a: usize, b: usize) -> f64 {
        match &self.orbital_coupling {
            Some(c) => c[a][b],
            None => {
                if a == b {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Onsite energies of `species` for each orbital.
    pub fn onsite_values(&self, species: &str) -> Vec<f64> {
        match self.onsite.get(species) {
            Some(Onsite::Scalar(v)) => vec![*v; self.nb],
            Some(Onsite::PerOrbital(v)) => v.clone(),
            None => vec![0.0; self.nb],
        }
    }

    /// Radial profile `f(r)` and `f'(r)` (orbital coupling excluded).
    pub fn radial(&self, r: f64) -> (f64, f64) {
        if r >= self.r_cut {
            return (0.0, 0.0);
        }
        let e = -self.t * (-self.gamma0 * (r - self.r0)).exp();
        let (tv, td) = taper(r, self.r_cut, self.taper_width);
        (e * tv, e * (td - self.gamma0 * tv))
    }

    /// `h^{ab}(xi)` and its gradient.
    pub fn eval_hopping(&self, a: usize, b: usize, xi: &Vec3) -> (f64, Vec3) {
        let c = self.coupling(a, b);
        let r = xi.norm();
        if c == 0.0 || r >= self.r_cut || r == 0.0 {
            return (0.0, Vec3::zeros());
        }
        let (f, df) = self.radial(r);
        (c * f, xi * (c * df / r))
    }

    /// Prefactor `h0` with `|f^{(j)}(r)| <= h0 e^{-gamma0 r}` for radial
    /// derivatives of order `j <= SMOOTHNESS`, taken over the coupling
    /// matrix.
    pub fn decay_prefactor(&self) -> f64 {
        // Sup norms of the septic smoothstep derivatives on [0, 1].
        const TAPER_SUP: [f64; 4] = [1.0, 2.1875, 7.5132, 52.5];
        let cmax = (0..self.nb)
            .flat_map(|a| (0..self.nb).map(move |b| (a, b)))
            .map(|(a, b)| self.coupling(a, b).abs())
            .fold(0.0, f64::max);
        let mut best: f64 = 0.0;
        for j in 0..=SMOOTHNESS {
            let mut s = 0.0;
            let mut binom = 1.0;
            for i in 0..=j {
                s +=
                    binom * self.gamma0.powi((j - i) as i32) * TAPER_SUP[i] / self.taper_width.powi(i as i32);
                binom = binom * (j - i) as f64 / (i + 1) as f64;
            }
            best = best.max(s);
        }
        self.t.abs() * (self.gamma0 * self.r0).exp() * cmax * best
    }
}

/// Dense real-symmetric Hamiltonian over (site, orbital) pairs, row
/// `site * nb + orbital`.
#[derive(Clone, Debug)]
pub struct Hamiltonian {
    pub matrix: DMatrix<f64>,
    pub n_sites: usize,
    pub nb: usize,
    /// Deformed positions `x + u(x)`.
    pub positions: Vec<Vec3>,
    pub periodicity: Option<Periodicity>,
}

impl Hamiltonian {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn index(&self, site: usize, orbital: usize) -> usize {
        site * self.nb + orbital
    }

    /// Calls `f(xi)` for every periodic image of `y_l - y_k` inside `cutoff`.
    fn for_each_separation(&self, l: usize, k: usize, cutoff: f64, mut f: impl FnMut(Vec3)) {
        let r = self.positions[l] - self.positions[k];
        match &self.periodicity {
            None => {
                if r.norm() < cutoff && l != k {
                    f(r)
                }
            }
            Some(p) => p.for_each_image(&r, cutoff, |v, _| {
                if l != k || v.norm() > 0.0 {
                    f(v)
                }
            }),
        }
    }
}

fn deformed_positions(host: &impl Geometry, u: &Displacement) -> Result<Vec<Vec3>> {
    if u.len() != host.n_sites() || u.dim() != host.dim() {
        return Err(Error::Invalid(format!(
            "displacement has {} sites in dimension {}, host has {} in dimension {}",
            u.len(),
            u.dim(),
            host.n_sites(),
            host.dim()
        )));
    }
    Ok(host
        .configuration()
        .sites
        .iter()
        .zip(u.values())
        .map(|(s, v)| s.position + v)
        .collect())
}

fn ensure_admissible(host: &impl Geometry, u: &Displacement, m: f64) -> Result<()> {
    let a = check_admissible(host, u, m);
    if !a.admissible {
        let (l, k, ratio) = a.worst.expect("a violating pair exists");
        return Err(Error::NotAdmissible(l, k, ratio));
    }
    Ok(())
}

/// Assembles `H(u)` on a cluster or `H^R(u)` on a torus.
pub fn assemble(host: &impl Geometry, u: &Displacement, model: &HoppingModel) -> Result<Hamiltonian> {
    model.validate(&host.configuration().crystal)?;
    ensure_admissible(host, u, model.admissibility)?;
    assemble_unchecked(host, u, model)
}

/// Assembly without the admissibility check (the caller guarantees it).
pub fn assemble_unchecked(
    host: &impl Geometry,
    u: &Displacement,
    model: &HoppingModel,
) -> Result<Hamiltonian> {
    let positions = deformed_positions(host, u)?;
    let n = host.n_sites();
    let nb = model.nb;
    let config = host.configuration();
    let species = config.crystal.species();
    let mut h = Hamiltonian {
        matrix: DMatrix::zeros(0, 0),
        n_sites: n,
        nb,
        positions,
        periodicity: host.periodicity().cloned(),
    };
    // Row block l holds the upper triangle (k >= l); each entry is an
    // ordered image sum, so values do not depend on scheduling.
    let rows: Vec<Vec<(usize, usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|l| {
            let mut out = Vec::new();
            let onsite = model.onsite_values(&species[config.sites[l].species]);
            for k in l..n {
                let mut block = vec![0.0; nb * nb];
                h.for_each_separation(l, k, model.r_cut, |xi| {
                    for a in 0..nb {
                        for b in 0..nb {
                            block[a * nb + b] += model.eval_hopping(a, b, &xi).0;
                        }
                    }
                });
                if k == l {
                    for a in 0..nb {
                        block[a * nb + a] += onsite[a];
                    }
                }
                for a in 0..nb {
                    for b in 0..nb {
                        let v = block[a * nb + b];
                        if v != 0.0 {
                            out.push((l * nb + a, k * nb + b, v));
                        }
                    }
                }
            }
            out
        })
        .collect();
    let mut m = DMatrix::zeros(n * nb, n * nb);
    for (i, j, v) in rows.into_iter().flatten() {
        if !v.is_finite() {
            return Err(Error::NonFinite(i, j));
        }
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    h.matrix = m;
    Ok(h)
}

/// Nonzero entries of `dH / d[u(m)]_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeBlock {
    pub site: usize,
    pub direction: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl DerivativeBlock {
    pub fn to_dense(&self, size: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(size, size);
        for &(i, j, v) in &self.entries {
            m[(i, j)] += v;
        }
        m
    }
}

pub fn hamiltonian_derivative(
    host: &impl Geometry,
    u: &Displacement,
    model: &HoppingModel,
    m: usize,
    i: usize,
) -> Result<DerivativeBlock> {
    model.validate(&host.configuration().crystal)?;
    ensure_admissible(host, u, model.admissibility)?;
    if m >= host.n_sites() || i >= host.dim() {
        return Err(Error::Invalid(format!(
            "derivative index ({m}, {i}) out of range"
        )));
    }
    let h = Hamiltonian {
        matrix: DMatrix::zeros(0, 0),
        n_sites: host.n_sites(),
        nb: model.nb,
        positions: deformed_positions(host, u)?,
        periodicity: host.periodicity().cloned(),
    };
    let nb = model.nb;
    let mut entries = Vec::new();
    for k in 0..host.n_sites() {
        if k == m {
            // Self-images are rigid translations of m and do not move.
            continue;
        }
        let mut block = vec![0.0; nb * nb];
        h.for_each_separation(m, k, model.r_cut, |xi| {
            for a in 0..nb {
                for b in 0..nb {
                    block[a * nb + b] += model.eval_hopping(a, b, &xi).1[i];
                }
            }
        });
        for a in 0..nb {
            for b in 0..nb {
                let v = block[a * nb + b];
                if v != 0.0 {
                    entries.push((m * nb + a, k * nb + b, v));
                    entries.push((k * nb + b, m * nb + a, v));
                }
            }
        }
    }
    Ok(DerivativeBlock {
        site: m,
        direction: i,
        entries,
    })
}

/// `[tr(Gamma dH/du(m)_i)]_{m,i}` for a symmetric density-like matrix
/// `Gamma`, as a displacement-shaped gradient.
pub fn contract_derivative(
    host: &impl Geometry,
    u: &Displacement,
    model: &HoppingModel,
    gamma: &DMatrix<f64>,
) -> Result<Displacement> {
    let positions = deformed_positions(host, u)?;
    let n = host.n_sites();
    let nb = model.nb;
    let h = Hamiltonian {
        matrix: DMatrix::zeros(0, 0),
        n_sites: n,
        nb,
        positions,
        periodicity: host.periodicity().cloned(),
    };
    let grads: Vec<Vec3> = (0..n)
        .into_par_iter()
        .map(|m| {
            let mut g = Vec3::zeros();
            for k in 0..n {
                if k == m {
                    continue;
                }
                h.for_each_separation(m, k, model.r_cut, |xi| {
                    for a in 0..nb {
                        for b in 0..nb {
                            let dh = model.eval_hopping(a, b, &xi).1;
                            g += dh * (2.0 * gamma[(m * nb + a, k * nb + b)]);
                        }
                    }
                });
            }
            g
        })
        .collect();
    Displacement::from_values(host.dim(), grads)
}

/// Pair energy `1/2 sum_{l,k} sum_alpha phi(|y_l - y_k + M alpha|)` and its
/// gradient. Zero when the model has no pair term.
pub fn pair_energy(
    host: &impl Geometry,
    u: &Displacement,
    model: &HoppingModel,
) -> Result<(f64, Displacement)> {
    let (sites, grad) = pair_terms(host, u, model)?;
    Ok((sites.iter().sum(), grad))
}

/// Per-site shares `1/2 sum_k sum_alpha phi` of the pair energy.
pub fn pair_site_energies(host: &impl Geometry, u: &Displacement, model: &HoppingModel) -> Result<Vec<f64>> {
    Ok(pair_terms(host, u, model)?.0)
}

fn pair_terms(
    host: &impl Geometry,
    u: &Displacement,
    model: &HoppingModel,
) -> Result<(Vec<f64>, Displacement)> {
    let positions = deformed_positions(host, u)?;
    let n = host.n_sites();
    if model.pair.is_empty() {
        return Ok((vec![0.0; n], Displacement::zeros(n, host.dim())));
    }
    let cutoff = model.pair.iter().map(|p| p.cutoff).fold(0.0, f64::max);
    let h = Hamiltonian {
        matrix: DMatrix::zeros(0, 0),
        n_sites: n,
        nb: 1,
        positions,
        periodicity: host.periodicity().cloned(),
    };
    let per_site: Vec<(f64, Vec3)> = (0..n)
        .into_par_iter()
        .map(|l| {
            let mut e = 0.0;
            let mut g = Vec3::zeros();
            for k in 0..n {
                h.for_each_separation(l, k, cutoff, |xi| {
                    let r = xi.norm();
                    let (v, dv) = model.pair_eval(r);
                    e += 0.5 * v;
                    if k != l {
                        g += xi * (dv / r);
                    }
                });
            }
            (e, g)
        })
        .collect();
    let energies = per_site.iter().map(|p| p.0).collect();
    let grad = Displacement::from_values(host.dim(), per_site.into_iter().map(|p| p.1).collect())?;
    Ok((energies, grad))
}

/// Bloch matrix `sum_gamma h(l - k + A gamma) e^{-i (l - k + A gamma) . xi}`
/// over (basis site, orbital) indices.
pub fn assemble_bloch(
    crystal: &ReferenceCrystal,
    model: &HoppingModel,
    xi: &[f64],
) -> Result<DMatrix<Complex64>> {
    model.validate(crystal)?;
    let dim = crystal.dim();
    if xi.len() != dim || xi.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid(format!(
            "wave vector needs {dim} finite components"
        )));
    }
    let mut k = Vec3::zeros();
    for (i, x) in xi.iter().enumerate() {
        k[i] = *x;
    }
    let lattice = Periodicity::new(dim, *crystal.cell())?;
    let basis = crystal.basis();
    let nb = model.nb;
    let size = basis.len() * nb;
    let mut m = DMatrix::from_element(size, size, Complex64::new(0.0, 0.0));
    for (l, (xl, sl)) in basis.iter().enumerate() {
        for (kk, (xk, _)) in basis.iter().enumerate() {
            let r = xl - xk;
            lattice.for_each_image(&r, model.r_cut, |v, _| {
                if v.norm() == 0.0 {
                    return;
                }
                let phase = Complex64::from_polar(1.0, -v.dot(&k));
                for a in 0..nb {
                    for b in 0..nb {
                        m[(l * nb + a, kk * nb + b)] += phase * model.eval_hopping(a, b, &v).0;
                    }
                }
            });
        }
        let onsite = model.onsite_values(&crystal.species()[*sl]);
        for a in 0..nb {
            m[(l * nb + a, l * nb + a)] += onsite[a];
        }
    }
    Ok(m)
}
