//! Dense eigendecomposition, band structures and gap detection, and
//! comparisons between spectra.

use std::collections::BTreeSet;
use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{assemble_bloch, Hamiltonian, HoppingModel};
use crate::lattice::{Periodicity, ReferenceCrystal, Vec3};

/// Ascending eigenvalues with orthonormal eigenvector columns.
#[derive(Clone, Debug)]
pub struct SpectralData {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
    pub n_sites: usize,
    pub nb: usize,
    pub fingerprint: u64,
}

impl SpectralData {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// `sum_a [psi_s]_{la}^2`.
    pub fn site_weight(&self, s: usize, l: usize) -> f64 {
        (0..self.nb)
            .map(|a| self.eigenvectors[(l * self.nb + a, s)].powi(2))
            .sum()
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    /// `dist(x, sigma)`.
    pub fn distance_to(&self, x: f64) -> f64 {
        self.eigenvalues
            .iter()
            .map(|l| (l - x).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

fn fingerprint(m: &DMatrix<f64>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    m.nrows().hash(&mut h);
    for v in m.iter() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Eigendecomposition of a Hamiltonian.
pub fn eigendecompose(h: &Hamiltonian) -> Result<SpectralData> {
    let mut s = eigendecompose_matrix(&h.matrix)?;
    s.n_sites = h.n_sites;
    s.nb = h.nb;
    Ok(s)
}

/// Eigendecomposition of a symmetric matrix (one orbital per row). The
/// first component above `1e-12` of every eigenvector is made positive.
pub fn eigendecompose_matrix(m: &DMatrix<f64>) -> Result<SpectralData> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::Invalid(
            "eigendecomposition needs a nonempty square matrix".into(),
        ));
    }
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFinite(i, j));
            }
        }
    }
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::Eigensolver("symmetric QR iteration did not converge".into()))?;
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut vectors = DMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (c, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        if let Some(first) = col.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        vectors.set_column(c, &col);
        values.push(eig.eigenvalues[i]);
    }
    Ok(SpectralData {
        eigenvalues: values,
        eigenvectors: vectors,
        n_sites: n,
        nb: 1,
        fingerprint: fingerprint(m),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub lower: f64,
    pub upper: f64,
    pub midpoint: f64,
    /// Number of bands below the gap.
    pub bands_below: usize,
}

impl Gap {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandStructure {
    pub dim: usize,
    /// Wave vectors in Cartesian coordinates.
    pub k_grid: Vec<Vec<f64>>,
    /// `bands[j][n] = lambda_n(xi_j)`.
    pub bands: Vec<Vec<f64>>,
    /// Widest detected gap, with refined edges.
    pub gap: Option<Gap>,
    /// Every detected gap, in ascending energy.
    pub gaps: Vec<Gap>,
}

impl BandStructure {
    pub fn require_gap(&self) -> Result<Gap> {
        self.gap.ok_or(Error::NoGap)
    }

    pub fn n_bands(&self) -> usize {
        self.bands.first().map_or(0, |b| b.len())
    }

    /// Merged band intervals, with gap edges taken from the refined values.
    pub fn intervals(&self) -> Vec<(f64, f64)> {
        let nb = self.n_bands();
        let mut iv: Vec<(f64, f64)> = (0..nb)
            .map(|n| {
                self.bands
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), b| {
                        (lo.min(b[n]), hi.max(b[n]))
                    })
            })
            .collect();
        for g in &self.gaps {
            if g.bands_below > 0 && g.bands_below < nb {
                iv[g.bands_below - 1].1 = iv[g.bands_below - 1].1.max(g.lower);
                iv[g.bands_below].0 = iv[g.bands_below].0.min(g.upper);
            }
        }
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for (lo, hi) in iv {
            match merged.last_mut() {
                Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
                _ => merged.push((lo, hi)),
            }
        }
        merged
    }

    /// Distance from `x` to the union of band intervals.
    pub fn distance_to_bands(&self, x: f64) -> f64 {
        self.intervals()
            .iter()
            .map(|&(lo, hi)| {
                if x < lo {
                    lo - x
                } else if x > hi {
                    x - hi
                } else {
                    0.0
                }
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn reciprocal(crystal: &ReferenceCrystal) -> nalgebra::Matrix3<f64> {
    // Columns b_j with a_i . b_j = 2 pi delta_ij.
    crystal
        .cell()
        .try_inverse()
        .expect("cell is invertible")
        .transpose()
        * (2.0 * std::f64::consts::PI)
}

fn cartesian(crystal: &ReferenceCrystal, frac: &[f64]) -> Vec<f64> {
    let b = reciprocal(crystal);
    let mut q = Vec3::zeros();
    for (i, f) in frac.iter().enumerate() {
        q[i] = *f;
    }
    let xi = b * q;
    xi.iter().take(crystal.dim()).copied().collect()
}

fn bloch_eigenvalues(crystal: &ReferenceCrystal, model: &HoppingModel, xi: &[f64]) -> Result<Vec<f64>> {
    let m = assemble_bloch(crystal, model, xi)?;
    let mut v: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Band `n` extremum near the fractional point `start`, refined by
/// repeatedly halving a local grid until the value moves less than `1e-6`.
fn refine_edge(
    crystal: &ReferenceCrystal,
    model: &HoppingModel,
    start: &[f64],
    spacing: f64,
    n: usize,
    maximise: bool,
    mut best: f64,
) -> Result<f64> {
    let dim = crystal.dim();
    let better = |a: f64, b: f64| if maximise { a > b } else { a < b };
    let mut centre = start.to_vec();
    let mut h = spacing;
    for _ in 0..64 {
        let mut trial_best = (best, centre.clone());
        let steps = 2i64;
        let count = (2 * steps + 1).pow(dim as u32);
        for idx in 0..count {
            let mut p = centre.clone();
            let mut rem = idx;
            for pi in p.iter_mut() {
                let o = rem % (2 * steps + 1) - steps;
                rem /= 2 * steps + 1;
                *pi += o as f64 * h / steps as f64;
            }
            let lam = bloch_eigenvalues(crystal, model, &cartesian(crystal, &p))?[n];
            if better(lam, trial_best.0) {
                trial_best = (lam, p);
            }
        }
        let moved = (trial_best.0 - best).abs();
        best = trial_best.0;
        centre = trial_best.1;
        h *= 0.5;
        if moved < 1e-6 && h < 1e-3 * spacing {
            return Ok(best);
        }
    }
    Ok(best)
}

/// Bands on a uniform `n_k^d` grid of the reciprocal cell, with gap
/// detection and edge refinement.
pub fn band_structure(crystal: &ReferenceCrystal, model: &HoppingModel, n_k: usize) -> Result<BandStructure> {
    if n_k < 8 {
        return Err(Error::Invalid("band structure needs n_k >= 8".into()));
    }
    model.validate(crystal)?;
    let dim = crystal.dim();
    let total = n_k.pow(dim as u32);
    let frac_of = |j: usize| -> Vec<f64> {
        let mut rem = j;
        let mut f = vec![0.0; dim];
        for fi in f.iter_mut().rev() {
            *fi = (rem % n_k) as f64 / n_k as f64 - 0.5;
            rem /= n_k;
        }
        f
    };
    let fracs: Vec<Vec<f64>> = (0..total).map(frac_of).collect();
    let k_grid: Vec<Vec<f64>> = fracs.iter().map(|f| cartesian(crystal, f)).collect();
    let bands: Vec<Vec<f64>> = k_grid
        .par_iter()
        .map(|xi| bloch_eigenvalues(crystal, model, xi))
        .collect::<Result<_>>()?;
    let nbands = bands[0].len();

    // Largest jump of a band between grid neighbours (periodic wrap).
    let mut spacing: f64 = 0.0;
    for j in 0..total {
        let mut stride = 1;
        for axis in (0..dim).rev() {
            let coord = (j / stride) % n_k;
            let next = j - coord * stride + ((coord + 1) % n_k) * stride;
            for n in 0..nbands {
                spacing = spacing.max((bands[j][n] - bands[next][n]).abs());
            }
            stride *= n_k;
            let _ = axis;
        }
    }
    let threshold = (10.0 * spacing).max(1e-9);

    let mut samples: Vec<(f64, usize, usize)> = Vec::with_capacity(total * nbands);
    for (j, b) in bands.iter().enumerate() {
        for (n, &v) in b.iter().enumerate() {
            samples.push((v, j, n));
        }
    }
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut gaps = Vec::new();
    for w in samples.windows(2) {
        if w[1].0 - w[0].0 > threshold {
            let (lo, jl, nl) = w[0];
            let (hi, ju, nu) = w[1];
            // A genuine gap separates band indices; otherwise a band jumps.
            if nu != nl + 1 || bands.iter().any(|b| b[nl] > lo || b[nu] < hi) {
                continue;
            }
            let step = 1.0 / n_k as f64;
            let lower = refine_edge(crystal, model, &fracs[jl], step, nl, true, lo)?;
            let upper = refine_edge(crystal, model, &fracs[ju], step, nu, false, hi)?;
            if upper > lower {
                gaps.push(Gap {
                    lower,
                    upper,
                    midpoint: 0.5 * (lower + upper),
                    bands_below: nu,
                });
            }
        }
    }
    let gap = gaps
        .iter()
        .copied()
        .max_by(|a, b| a.width().total_cmp(&b.width()));
    Ok(BandStructure {
        dim,
        k_grid,
        bands,
        gap,
        gaps,
    })
}

/// `max(sup_a inf_b |a - b|, sup_b inf_a |a - b|)`.
pub fn hausdorff_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("Hausdorff distance of an empty set".into()));
    }
    let directed = |x: &[f64], y: &[f64]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p - q).abs()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Ok(directed(a, b).max(directed(b, a)))
}

/// Eigenvalues farther than `delta` from the reference bands.
pub fn defect_state_count(
    eigenvalues: &[f64],
    reference: &BandStructure,
    delta: f64,
) -> Result<(usize, Vec<f64>)> {
    if !(delta > 0.0) {
        return Err(Error::Invalid("delta must be positive".into()));
    }
    let out: Vec<f64> = eigenvalues
        .iter()
        .copied()
        .filter(|&l| reference.distance_to_bands(l) > delta)
        .collect();
    Ok((out.len(), out))
}

/// Wave vectors of `Gamma*_R`: `xi` with `xi . M alpha in 2 pi Z`, reduced
/// modulo the reciprocal lattice of the crystal. Returned in Cartesian
/// coordinates.
pub fn torus_wave_vectors(crystal: &ReferenceCrystal, period: &Periodicity) -> Result<Vec<Vec<f64>>> {
    let dim = crystal.dim();
    let ainv = crystal.cell().try_inverse().expect("cell is invertible");
    let k = ainv * period.matrix();
    let det = nalgebra::DMatrix::from_fn(dim, dim, |i, j| k[(i, j)])
        .determinant()
        .abs()
        .round() as i64;
    if det < 1 {
        return Err(Error::Singular("period matrix".into()));
    }
    let kinv_t = k
        .try_inverse()
        .ok_or_else(|| Error::Singular("period matrix".into()))?
        .transpose();
    // q = K^{-T} n are the fractional reciprocal coordinates; n over a box
    // of side det hits every class.
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let count = det.pow(dim as u32);
    for idx in 0..count {
        let mut n = Vec3::zeros();
        let mut rem = idx;
        for i in 0..dim {
            n[i] = (rem % det) as f64;
            rem /= det;
        }
        let q = kinv_t * n;
        let mut key = [0i64; 3];
        let mut frac = vec![0.0; dim];
        for i in 0..dim {
            let r = q[i] - q[i].floor();
            let r = if r > 1.0 - 1e-9 { 0.0 } else { r };
            key[i] = (r * 1e9).round() as i64;
            frac[i] = r;
        }
        if seen.insert(key) {
            out.push(cartesian(crystal, &frac));
        }
        if out.len() as i64 == det {
            break;
        }
    }
    Ok(out)
}

/// `⋃_{xi ∈ Gamma*_R} sigma(H_xi)`, sorted.
pub fn torus_bloch_spectrum(
    crystal: &ReferenceCrystal,
    model: &HoppingModel,
    period: &Periodicity,
) -> Result<Vec<f64>> {
    let ks = torus_wave_vectors(crystal, period)?;
    let mut all: Vec<f64> = ks
        .par_iter()
        .map(|xi| bloch_eigenvalues(crystal, model, xi))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    all.sort_by(f64::total_cmp);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::assemble;
    use crate::lattice::{torus_of_cells, Displacement};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_matrix() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let s = eigendecompose_matrix(&m).unwrap();
        assert_eq!(s.eigenvalues, vec![1.0, 2.0, 3.0]);
        assert_eq!(s.eigenvectors[(1, 0)], 1.0);
    }

    #[test]
    fn four_ring_spectrum() {
        let cell = torus_of_cells(&ReferenceCrystal::simple(1, 1.0), None, &[4]).unwrap();
        let model = HoppingModel::simple_nearest_neighbor(1.0, 1.5);
        let h = assemble(&cell, &Displacement::zeros(4, 1), &model).unwrap();
        let s = eigendecompose(&h).unwrap();
        let expected: Vec<f64> = {
            let mut v: Vec<f64> = (0..4)
                .map(|j| -2.0 * (2.0 * std::f64::consts::PI * j as f64 / 4.0).cos())
                .collect();
            v.sort_by(f64::total_cmp);
            v
        };
        for (a, b) in s.eigenvalues.iter().zip(expected) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn random_residuals_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [1, 2, 7, 30] {
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let m = &a + a.transpose();
            let s = eigendecompose_matrix(&m).unwrap();
            let norm2 = s.eigenvalues.iter().map(|x| x.abs()).fold(0.0, f64::max);
            for (j, lam) in s.eigenvalues.iter().enumerate() {
                let psi = s.eigenvectors.column(j);
                assert!((&m * psi - psi * *lam).norm() <= 1e-9 * norm2);
                let first = psi.iter().find(|x| x.abs() > 1e-12).unwrap();
                assert!(*first > 0.0);
            }
            let gram = s.eigenvectors.transpose() * &s.eigenvectors;
            assert!((gram - DMatrix::identity(n, n)).abs().max() < 1e-10);
            assert!(s.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
            assert_relative_eq!(
                s.eigenvalues.iter().sum::<f64>(),
                m.trace(),
                epsilon = 1e-9 * norm2 * n as f64
            );
        }
        let bad = DMatrix::from_element(2, 2, f64::NAN);
        assert!(matches!(eigendecompose_matrix(&bad), Err(Error::NonFinite(0, 0))));
    }

    #[test]
    fn chain_bands_closed_form() {
        let crystal = ReferenceCrystal::two_species_chain();
        let model = HoppingModel::nearest_neighbor_chain();
        let bs = band_structure(&crystal, &model, 64).unwrap();
        let t: f64 = 0.5;
        for (xi, b) in bs.k_grid.iter().zip(&bs.bands) {
            // Cell length 2, so the closed-form phase is 2 xi.
            let e = (1.0 + 2.0 * t * t * (1.0 + (2.0 * xi[0]).cos())).sqrt();
            assert_relative_eq!(b[0], -e, epsilon = 1e-12);
            assert_relative_eq!(b[1], e, epsilon = 1e-12);
        }
        let gap = bs.require_gap().unwrap();
        assert_relative_eq!(gap.lower, -1.0, epsilon = 1e-9);
        assert_relative_eq!(gap.upper, 1.0, epsilon = 1e-9);
        assert!(gap.midpoint.abs() < 1e-9);
    }

    #[test]
    fn metal_has_no_gap() {
        let bs = band_structure(
            &ReferenceCrystal::simple(1, 1.0),
            &HoppingModel::simple_nearest_neighbor(1.0, 1.5),
            32,
        )
        .unwrap();
        assert!(bs.gap.is_none());
        assert_eq!(bs.require_gap(), Err(Error::NoGap));
    }

    #[test]
    fn hausdorff_examples() {
        assert_eq!(hausdorff_distance(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(hausdorff_distance(&[0.0, 1.0], &[0.0, 1.5]).unwrap(), 0.5);
        assert_eq!(hausdorff_distance(&[0.0, 1.5], &[0.0, 1.0]).unwrap(), 0.5);
        assert!(hausdorff_distance(&[], &[1.0]).is_err());
    }

    #[test]
    fn counting_against_constructed_bands() {
        let bs = BandStructure {
            dim: 1,
            k_grid: vec![vec![0.0], vec![1.0]],
            bands: vec![vec![-2.0, 1.0], vec![-1.0, 2.0]],
            gap: None,
            gaps: vec![],
        };
        let (count, states) = defect_state_count(&[-1.5, 0.0, 1.2, 2.0], &bs, 0.5).unwrap();
        assert_eq!((count, states), (1, vec![0.0]));
    }

    #[test]
    fn torus_wave_vector_count() {
        let crystal = ReferenceCrystal::simple(2, 1.0);
        let p = Periodicity::new(
            2,
            nalgebra::Matrix3::new(4.0, 1.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 1.0),
        )
        .unwrap();
        assert_eq!(torus_wave_vectors(&crystal, &p).unwrap().len(), 12);
    }
}
