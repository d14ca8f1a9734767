//! Resolvent calculus: the analytic continuation of the grand-potential
//! density, rectangular contours, site energies by eigenvectors and by
//! contour integrals, the grand-potential difference, and resolvent decay.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::linear_regression;
use crate::hamiltonian::{assemble, pair_site_energies, Hamiltonian, HoppingModel};
use crate::lattice::{Displacement, Geometry};
use crate::spectrum::{eigendecompose, SpectralData};
use crate::thermo::{check_collision, grand_density, Beta, COLLISION_TOL};

/// `log(1 + x)` without cancellation for small `x`.
fn ln_1p(x: Complex64) -> Complex64 {
    let u = 1.0 + x;
    if u == Complex64::new(1.0, 0.0) {
        x
    } else {
        u.ln() * x / (u - 1.0)
    }
}

/// Analytic continuation of `g_beta(.; mu)` off the real axis.
///
/// For `Re(z - mu) >= 0` this is `-(2/beta) log(1 + e^{-beta w})`, and for
/// `Re(z - mu) < 0` the equivalent `2w - (2/beta) log(1 + e^{beta w})`; both
/// arguments of the logarithm stay in the right half plane, so the principal
/// branch is the continuation and nothing overflows.
pub fn gbeta_analytic(z: Complex64, beta: Beta, mu: f64) -> Result<Complex64> {
    let w = z - mu;
    match beta {
        Beta::Infinite => {
            if w.re == 0.0 {
                Err(Error::Invalid(format!(
                    "zero-temperature density is not analytic at Re z = mu (z = {z})"
                )))
            } else if w.re < 0.0 {
                Ok(2.0 * w)
            } else {
                Ok(Complex64::new(0.0, 0.0))
            }
        }
        Beta::Finite(b) => {
            if w.re == 0.0 && (b * w.im).abs() >= std::f64::consts::PI {
                return Err(Error::Invalid(format!(
                    "z = {z} lies on a branch cut mu + i r, |r| >= pi/beta"
                )));
            }
            if w.re >= 0.0 {
                Ok(-(2.0 / b) * ln_1p((-b * w).exp()))
            } else {
                Ok(2.0 * w - (2.0 / b) * ln_1p((b * w).exp()))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// Encircles the spectrum below `mu`.
    Minus,
    /// Encircles the spectrum above `mu`.
    Plus,
}

/// Counter-clockwise axis-aligned rectangle with composite Gauss–Legendre
/// quadrature on its edges. Weights include `dz` and `-1/(2 pi i)`.
#[derive(Clone, Debug)]
pub struct Contour {
    pub side: Side,
    pub re_min: f64,
    pub re_max: f64,
    pub half_height: f64,
    /// Panels per unit length at level 0.
    pub panel_density: f64,
    pub nodes: Vec<Complex64>,
    pub weights: Vec<Complex64>,
    /// `min_j dist(z_j, sigma)`.
    pub spectrum_clearance: f64,
    /// `min_j |Re z_j - mu|`.
    pub line_clearance: f64,
}

const GAUSS_POINTS: usize = 16;

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, t);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * t * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (t * p1 - p0) / (t * t - 1.0);
            let dt = p1 / dp;
            t -= dt;
            if dt.abs() < 1e-16 {
                break;
            }
        }
        x[i] = t;
        w[i] = 2.0 / ((1.0 - t * t) * dp * dp);
    }
    (x, w)
}

impl Contour {
    /// Rectangle `[re_min, re_max] x [-half_height, half_height]` at quadrature
    /// level 0.
    pub fn rectangle(side: Side, re_min: f64, re_max: f64, half_height: f64) -> Self {
        let mut c = Contour {
            side,
            re_min,
            re_max,
            half_height,
            panel_density: 1.0 / half_height,
            nodes: vec![],
            weights: vec![],
            spectrum_clearance: 0.0,
            line_clearance: 0.0,
        };
        let (n, w) = c.quadrature(0);
        c.nodes = n;
        c.weights = w;
        c
    }

    /// Nodes and weights with `2^level` times the base panel count.
    pub fn quadrature(&self, level: u32) -> (Vec<Complex64>, Vec<Complex64>) {
        let (gx, gw) = gauss_legendre(GAUSS_POINTS);
        let h = self.half_height;
        let corners = [
            Complex64::new(self.re_min, -h),
            Complex64::new(self.re_max, -h),
            Complex64::new(self.re_max, h),
            Complex64::new(self.re_min, h),
        ];
        let prefactor = -1.0 / Complex64::new(0.0, 2.0 * std::f64::consts::PI);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for e in 0..4 {
            let (a, b) = (corners[e], corners[(e + 1) % 4]);
            let len = (b - a).norm();
            let panels = ((len * self.panel_density).ceil() as usize).max(1) << level;
            for p in 0..panels {
                let pa = a + (b - a) * (p as f64 / panels as f64);
                let pb = a + (b - a) * ((p + 1) as f64 / panels as f64);
                let half = (pb - pa) * 0.5;
                let mid = (pa + pb) * 0.5;
                for (x, w) in gx.iter().zip(&gw) {
                    nodes.push(mid + half * *x);
                    weights.push(prefactor * half * *w);
                }
            }
        }
        (nodes, weights)
    }

    fn measure_clearance(&mut self, eigenvalues: &[f64], mu: f64) {
        self.spectrum_clearance = self
            .nodes
            .iter()
            .map(|z| {
                eigenvalues
                    .iter()
                    .map(|l| (z - l).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::INFINITY, f64::min);
        self.line_clearance = self
            .nodes
            .iter()
            .map(|z| (z.re - mu).abs())
            .fold(f64::INFINITY, f64::min);
    }
}

/// Rectangles `C-` over `[lambda_min - 1, mu - d/2]` and `C+` over
/// `[mu + d/2, lambda_max + 1]`, with half-height `d/2` clamped to
/// `pi/(2 beta)` at finite temperature.
pub fn build_contours(eigenvalues: &[f64], mu: f64, beta: Beta) -> Result<(Contour, Contour)> {
    if eigenvalues.is_empty() {
        return Err(Error::Invalid("empty spectrum".into()));
    }
    let d = check_collision(eigenvalues, mu)?;
    let lo = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut hh = 0.5 * d;
    if let Beta::Finite(b) = beta {
        hh = hh.min(std::f64::consts::FRAC_PI_2 / b);
    }
    let minus_hi = mu - 0.5 * d;
    let plus_lo = mu + 0.5 * d;
    let mut minus = Contour::rectangle(Side::Minus, (lo - 1.0).min(minus_hi - 1.0), minus_hi, hh);
    let mut plus = Contour::rectangle(Side::Plus, plus_lo, (hi + 1.0).max(plus_lo + 1.0), hh);
    minus.measure_clearance(eigenvalues, mu);
    plus.measure_clearance(eigenvalues, mu);
    Ok((minus, plus))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Eigen,
    Contour,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SiteEnergyTable {
    pub values: Vec<f64>,
    pub method: Method,
    pub beta: Beta,
    pub mu: f64,
    /// Quadrature nodes used on the final level (contour method only).
    pub nodes: usize,
}

impl SiteEnergyTable {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// `G_l = sum_s g_beta(lambda_s; mu) sum_a [psi_s]_{la}^2`.
pub fn site_energy_eigen(spec: &SpectralData, beta: Beta, mu: f64, l: usize) -> Result<f64> {
    if l >= spec.n_sites {
        return Err(Error::Invalid(format!("site {l} out of range")));
    }
    if beta.is_infinite() {
        check_collision(&spec.eigenvalues, mu)?;
    }
    Ok(spec
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(s, &lam)| grand_density(beta, lam, mu) * spec.site_weight(s, l))
        .sum())
}

/// Eigenvector site energies of every site.
pub fn site_energies_eigen(spec: &SpectralData, beta: Beta, mu: f64) -> Result<SiteEnergyTable> {
    if beta.is_infinite() {
        check_collision(&spec.eigenvalues, mu)?;
    }
    let g: Vec<f64> = spec
        .eigenvalues
        .iter()
        .map(|&lam| grand_density(beta, lam, mu))
        .collect();
    let values = (0..spec.n_sites)
        .map(|l| {
            g.iter()
                .enumerate()
                .map(|(s, gs)| gs * spec.site_weight(s, l))
                .sum()
        })
        .collect();
    Ok(SiteEnergyTable {
        values,
        method: Method::Eigen,
        beta,
        mu,
        nodes: 0,
    })
}

/// Tolerance between successive quadrature levels.
pub const CONTOUR_TOL: f64 = 1e-9;
/// Cap on the nodes of one contour.
pub const MAX_NODES: usize = 1 << 14;

fn complex_shifted(h: &DMatrix<f64>, z: Complex64) -> DMatrix<Complex64> {
    let n = h.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let v = Complex64::new(h[(i, j)], 0.0);
        if i == j {
            v - z
        } else {
            v
        }
    })
}

/// `H = Q T Q^T` with `T` symmetric tridiagonal, computed once per
/// Hamiltonian so that each quadrature node costs `O(n)` per right-hand side.
struct Tridiagonal {
    q: DMatrix<f64>,
    diag: Vec<f64>,
    off: Vec<f64>,
}

impl Tridiagonal {
    fn new(h: &DMatrix<f64>) -> Self {
        let (q, diag, off) = nalgebra::SymmetricTridiagonal::new(h.clone()).unpack();
        Tridiagonal {
            q,
            diag: diag.iter().copied().collect(),
            off: off.iter().copied().collect(),
        }
    }
}

/// LU factors of a complex tridiagonal matrix with partial pivoting, as in
/// LAPACK `gtsv`. Pivoting matters: leading blocks of `T - z` can have
/// eigenvalues next to `Re z` even when `T` has none there.
struct TridiagonalLu {
    d: Vec<Complex64>,
    du: Vec<Complex64>,
    du2: Vec<Complex64>,
    mult: Vec<Complex64>,
    swap: Vec<bool>,
}

impl TridiagonalLu {
    /// Factors `T - z`.
    fn new(t: &Tridiagonal, z: Complex64) -> Result<Self> {
        let n = t.diag.len();
        let mut d: Vec<Complex64> = t.diag.iter().map(|&x| Complex64::new(x, 0.0) - z).collect();
        let mut dl: Vec<Complex64> = t.off.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        let mut du = dl.clone();
        let mut du2 = vec![Complex64::new(0.0, 0.0); n.saturating_sub(2)];
        let mut mult = vec![Complex64::new(0.0, 0.0); n.saturating_sub(1)];
        let mut swap = vec![false; n.saturating_sub(1)];
        for i in 0..n.saturating_sub(1) {
            if d[i].norm() >= dl[i].norm() {
                if d[i] == Complex64::new(0.0, 0.0) {
                    return Err(Error::Singular(format!("resolvent at z = {z}")));
                }
                let m = dl[i] / d[i];
                mult[i] = m;
                d[i + 1] -= m * du[i];
            } else {
                let m = d[i] / dl[i];
                mult[i] = m;
                swap[i] = true;
                d[i] = dl[i];
                let tmp = d[i + 1];
                d[i + 1] = du[i] - m * tmp;
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] = -m * du2[i];
                }
                du[i] = tmp;
            }
            dl[i] = Complex64::new(0.0, 0.0);
        }
        if n > 0 && d[n - 1] == Complex64::new(0.0, 0.0) {
            return Err(Error::Singular(format!("resolvent at z = {z}")));
        }
        Ok(TridiagonalLu {
            d,
            du,
            du2,
            mult,
            swap,
        })
    }

    fn solve(&self, b: &mut [Complex64]) {
        let n = self.d.len();
        for i in 0..n.saturating_sub(1) {
            if self.swap[i] {
                let tmp = b[i];
                b[i] = b[i + 1];
                b[i + 1] = tmp - self.mult[i] * b[i];
            } else {
                b[i + 1] -= self.mult[i] * b[i];
            }
        }
        for i in (0..n).rev() {
            let mut v = b[i];
            if i + 1 < n {
                v -= self.du[i] * b[i + 1];
            }
            if i + 2 < n {
                v -= self.du2[i] * b[i + 2];
            }
            b[i] = v / self.d[i];
        }
    }
}

/// `sum_j w_j g(z_j) sum_a [(H - z_j)^{-1}]_{la,la}` for each requested site,
/// using `[(H - z)^{-1}]_{ii} = q_i^T (T - z)^{-1} q_i` with `q_i` row `i`
/// of `Q`.
fn contour_sum(
    tri: &Tridiagonal,
    nb: usize,
    nodes: &[Complex64],
    weights: &[Complex64],
    beta: Beta,
    mu: f64,
    sites: &[usize],
) -> Result<Vec<f64>> {
    let size = tri.diag.len();
    let per_node: Vec<Vec<Complex64>> = nodes
        .par_iter()
        .zip(weights.par_iter())
        .map(|(&z, &w)| {
            let g = gbeta_analytic(z, beta, mu)?;
            if g == Complex64::new(0.0, 0.0) {
                return Ok(vec![Complex64::new(0.0, 0.0); sites.len()]);
            }
            let lu = TridiagonalLu::new(tri, z)?;
            let mut x = vec![Complex64::new(0.0, 0.0); size];
            let mut out = Vec::with_capacity(sites.len());
            for &l in sites {
                let mut acc = Complex64::new(0.0, 0.0);
                for a in 0..nb {
                    let row = tri.q.row(l * nb + a);
                    for (xi, &qi) in x.iter_mut().zip(row.iter()) {
                        *xi = Complex64::new(qi, 0.0);
                    }
                    lu.solve(&mut x);
                    acc += row.iter().zip(&x).map(|(&qi, xi)| xi * qi).sum::<Complex64>();
                }
                out.push(w * g * acc);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    // Fixed node order keeps the reduction deterministic.
    let mut totals = vec![Complex64::new(0.0, 0.0); sites.len()];
    for row in per_node {
        for (t, v) in totals.iter_mut().zip(row) {
            *t += v;
        }
    }
    Ok(totals.into_iter().map(|c| c.re).collect())
}

fn contour_integral(
    tri: &Tridiagonal,
    nb: usize,
    contour: &Contour,
    beta: Beta,
    mu: f64,
    sites: &[usize],
) -> Result<(Vec<f64>, usize)> {
    if beta.is_infinite() && contour.side == Side::Plus {
        // g vanishes identically right of mu.
        return Ok((vec![0.0; sites.len()], 0));
    }
    let (n0, w0) = contour.quadrature(0);
    let mut prev = contour_sum(tri, nb, &n0, &w0, beta, mu, sites)?;
    let mut level = 1;
    loop {
        let (n, w) = contour.quadrature(level);
        if n.len() > MAX_NODES {
            return Err(Error::NoConvergence(format!(
                "contour quadrature exceeds {MAX_NODES} nodes"
            )));
        }
        let next = contour_sum(tri, nb, &n, &w, beta, mu, sites)?;
        let change = prev
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if change < CONTOUR_TOL {
            return Ok((next, n.len()));
        }
        prev = next;
        level += 1;
    }
}

/// Contour site energies of the requested sites, refined by doubling the
/// panel count until successive levels agree to `CONTOUR_TOL`.
pub fn site_energies_contour(
    h: &Hamiltonian,
    contours: &(Contour, Contour),
    beta: Beta,
    mu: f64,
    sites: &[usize],
) -> Result<SiteEnergyTable> {
    if let Some(&bad) = sites.iter().find(|&&l| l >= h.n_sites) {
        return Err(Error::Invalid(format!("site {bad} out of range")));
    }
    let tri = Tridiagonal::new(&h.matrix);
    let (minus, m_nodes) = contour_integral(&tri, h.nb, &contours.0, beta, mu, sites)?;
    let (plus, p_nodes) = contour_integral(&tri, h.nb, &contours.1, beta, mu, sites)?;
    Ok(SiteEnergyTable {
        values: minus.iter().zip(&plus).map(|(a, b)| a + b).collect(),
        method: Method::Contour,
        beta,
        mu,
        nodes: m_nodes + p_nodes,
    })
}

pub fn site_energy_contour(
    h: &Hamiltonian,
    contours: &(Contour, Contour),
    beta: Beta,
    mu: f64,
    l: usize,
) -> Result<f64> {
    Ok(site_energies_contour(h, contours, beta, mu, &[l])?.values[0])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GrandPotentialDifference {
    pub total: f64,
    /// `G_l(u) - G_l(0)` including the pair-energy shares.
    pub per_site: Vec<f64>,
}

/// Site energies (electronic plus pair shares) of one configuration.
pub fn total_site_energies(
    host: &impl Geometry,
    u: &Displacement,
    model: &HoppingModel,
    beta: Beta,
    mu: f64,
) -> Result<Vec<f64>> {
    let h = assemble(host, u, model)?;
    let spec = eigendecompose(&h)?;
    let electronic = site_energies_eigen(&spec, beta, mu)?;
    let pair = pair_site_energies(host, u, model)?;
    Ok(electronic.values.iter().zip(&pair).map(|(a, b)| a + b).collect())
}

/// `sum_l [G_l(u) - G_l(0)]` over the cell.
pub fn grand_potential_difference(
    host: &impl Geometry,
    u: &Displacement,
    model: &HoppingModel,
    beta: Beta,
    mu: f64,
) -> Result<GrandPotentialDifference> {
    let displaced = total_site_energies(host, u, model, beta, mu)?;
    let reference = total_site_energies(host, &Displacement::zeros_for(host), model, beta, mu)?;
    let per_site: Vec<f64> = displaced.iter().zip(&reference).map(|(a, b)| a - b).collect();
    Ok(GrandPotentialDifference {
        total: per_site.iter().sum(),
        per_site,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalityProfile {
    pub site: usize,
    /// `(distance, max_ab |[R_z]_{lk}^{ab}|)` for every site `k`.
    pub entries: Vec<(f64, f64)>,
    pub gamma_fit: f64,
    pub prefactor: f64,
    pub r2: f64,
}

/// One resolvent column block and the fitted exponential decay rate of its
/// entries against (minimal-image) distance from site `l`.
pub fn locality_profile(h: &Hamiltonian, z: Complex64, l: usize) -> Result<LocalityProfile> {
    if l >= h.n_sites {
        return Err(Error::Invalid(format!("site {l} out of range")));
    }
    let nb = h.nb;
    let size = h.dim();
    let lu = complex_shifted(&h.matrix, z).lu();
    let mut mags = vec![0.0f64; h.n_sites];
    for a in 0..nb {
        let mut e = nalgebra::DVector::from_element(size, Complex64::new(0.0, 0.0));
        e[l * nb + a] = Complex64::new(1.0, 0.0);
        let x = lu
            .solve(&e)
            .ok_or_else(|| Error::Singular(format!("resolvent at z = {z}")))?;
        if x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Singular(format!("resolvent at z = {z}")));
        }
        for k in 0..h.n_sites {
            for b in 0..nb {
                mags[k] = mags[k].max(x[k * nb + b].norm());
            }
        }
    }
    let entries: Vec<(f64, f64)> = (0..h.n_sites)
        .map(|k| {
            let r = h.positions[k] - h.positions[l];
            let d = match &h.periodicity {
                Some(p) => p.min_image(&r).0.norm(),
                None => r.norm(),
            };
            (d, mags[k])
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = entries
        .iter()
        .filter(|(_, m)| *m >= 1e-14)
        .map(|(d, m)| (*d, m.ln()))
        .unzip();
    let (gamma_fit, prefactor, r2) = match linear_regression(&xs, &ys) {
        Ok((slope, intercept, r2)) => (-slope, intercept.exp(), r2),
        // Only the diagonal survives, as for a diagonal Hamiltonian.
        Err(_) => (f64::INFINITY, mags[l], 1.0),
    };
    Ok(LocalityProfile {
        site: l,
        entries,
        gamma_fit,
        prefactor,
        r2,
    })
}

/// `dist(mu, sigma)`; zero-temperature quantities need it above the
/// collision tolerance.
pub fn spectral_distance(eigenvalues: &[f64], mu: f64) -> f64 {
    eigenvalues
        .iter()
        .map(|l| (l - mu).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Whether `mu` is clear of the spectrum.
pub fn is_clear(eigenvalues: &[f64], mu: f64) -> bool {
    spectral_distance(eigenvalues, mu) >= COLLISION_TOL
}
