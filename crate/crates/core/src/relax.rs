//! Energies and analytic forces in both ensembles, L-BFGS relaxation and the
//! strong-stability constant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{assemble, contract_derivative, pair_energy, HoppingModel};
use crate::lattice::{check_admissible, seminorm_gram, Displacement, Geometry, SeminormConfig};
use crate::spectrum::{eigendecompose, SpectralData};
use crate::thermo::{
    check_collision, grand_potential, helmholtz_energy, level_equal, occupation, solve_fermi_level, Beta,
    Ensemble,
};

/// Energy, gradient and spectral data of one configuration.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Grand potential (GCE) or Helmholtz free energy (CE), pair term
    /// included.
    pub energy: f64,
    pub gradient: Displacement,
    /// `mu` (GCE) or `eps_F(u)` (CE).
    pub level: f64,
    /// `dist(level, sigma(H(u)))`.
    pub gap_distance: f64,
    pub spectrum: SpectralData,
}

impl Evaluation {
    pub fn forces(&self) -> Displacement {
        self.gradient.scaled(-1.0)
    }

    pub fn force_norm(&self) -> f64 {
        self.gradient.max_norm()
    }
}

fn density_matrix(spec: &SpectralData, weights: &[f64]) -> DMatrix<f64> {
    let v = &spec.eigenvectors;
    let mut scaled = v.clone();
    for (j, w) in weights.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*w);
    }
    scaled * v.transpose()
}

/// Evaluates the ensemble energy and its gradient at `u`.
///
/// In both ensembles the gradient is `sum_s 2 f_beta(lambda_s - tau) dlambda_s`
/// with `tau = mu` or `tau = eps_F(u)`; in the canonical case the terms from
/// the variation of `eps_F` cancel because the particle number is fixed.
pub fn evaluate(
    host: &impl Geometry,
    u: &Displacement,
    model: &HoppingModel,
    ensemble: &Ensemble,
) -> Result<Evaluation> {
    let h = assemble(host, u, model)?;
    let spec = eigendecompose(&h)?;
    ensemble.validate(spec.len())?;
    let eigs = &spec.eigenvalues;
    let beta = ensemble.beta();
    let (electronic, level) = match *ensemble {
        Ensemble::GrandCanonical { mu, beta } => (grand_potential(eigs, beta, mu)?, mu),
        Ensemble::Canonical { electrons, beta } => {
            let ef = solve_fermi_level(eigs, electrons, beta)?.level;
            if beta.is_infinite() {
                let at_level = eigs.iter().filter(|&&l| level_equal(l, ef)).count();
                if at_level > 1 {
                    return Err(Error::DegenerateFermiLevel(ef));
                }
            }
            (helmholtz_energy(eigs, beta, ef), ef)
        }
    };
    let gap_distance = eigs
        .iter()
        .map(|l| (l - level).abs())
        .fold(f64::INFINITY, f64::min);
    if beta.is_infinite() && matches!(ensemble, Ensemble::GrandCanonical { .. }) {
        check_collision(eigs, level)?;
    }
    let weights: Vec<f64> = eigs.iter().map(|&l| occupation(beta, l, level)).collect();
    let gamma = density_matrix(&spec, &weights);
    let electronic_grad = contract_derivative(host, u, model, &gamma)?;
    let (pair, pair_grad) = pair_energy(host, u, model)?;
    Ok(Evaluation {
        energy: electronic + pair,
        gradient: electronic_grad.add(&pair_grad),
        level,
        gap_distance,
        spectrum: spec,
    })
}

/// `F_m = -dE/du(m)`.
pub fn forces(
    host: &impl Geometry,
    u: &Displacement,
    model: &HoppingModel,
    ensemble: &Ensemble,
) -> Result<Displacement> {
    Ok(evaluate(host, u, model, ensemble)?.forces())
}

/// Energy only; same value as `evaluate(..).energy`.
pub fn energy(
    host: &impl Geometry,
    u: &Displacement,
    model: &HoppingModel,
    ensemble: &Ensemble,
) -> Result<f64> {
    Ok(evaluate(host, u, model, ensemble)?.energy)
}

#[derive(Clone, Debug)]
pub struct RelaxProblem<'a, G: Geometry> {
    pub host: &'a G,
    pub model: HoppingModel,
    pub ensemble: Ensemble,
    pub initial: Displacement,
    /// Admissibility constant enforced on every accepted iterate.
    pub admissibility: f64,
    pub force_tolerance: f64,
    pub max_iterations: usize,
    /// Seminorm for the stability estimate; skipped when `None`.
    pub stability: Option<SeminormConfig>,
}

impl<'a, G: Geometry> RelaxProblem<'a, G> {
    pub fn new(host: &'a G, model: &HoppingModel, ensemble: Ensemble) -> Self {
        RelaxProblem {
            host,
            model: model.clone(),
            ensemble,
            initial: Displacement::zeros_for(host),
            admissibility: model.admissibility,
            force_tolerance: 1e-8,
            max_iterations: 500,
            stability: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    pub energy: f64,
    pub force_norm: f64,
    pub gap_distance: f64,
    pub level: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelaxResult {
    /// Relaxed displacement, shifted to zero mean on tori.
    pub displacement: Displacement,
    pub energy: f64,
    pub level: f64,
    pub iterations: usize,
    pub force_norm: f64,
    pub stability: Option<f64>,
    pub gap_distance: f64,
    pub eigenvalues: Vec<f64>,
    pub trajectory: Vec<TrajectoryPoint>,
}

const HISTORY: usize = 10;
const MAX_STEP: f64 = 0.1;
const ARMIJO: f64 = 1e-4;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup_site_norm(flat: &[f64], dim: usize) -> f64 {
    flat.chunks(dim)
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Minimises the ensemble energy by L-BFGS with a backtracking line search.
/// Trial points that are inadmissible or hit a zero-temperature collision
/// are rejected by shrinking the step.
pub fn relax_geometry<G: Geometry>(problem: &RelaxProblem<'_, G>) -> Result<RelaxResult> {
    let host = problem.host;
    let dim = host.dim();
    if !(problem.force_tolerance > 0.0) {
        return Err(Error::Invalid("force tolerance must be positive".into()));
    }
    let mut model = problem.model.clone();
    model.admissibility = problem.admissibility;
    let adm = check_admissible(host, &problem.initial, problem.admissibility);
    if !adm.admissible {
        let (l, k, r) = adm.worst.expect("violating pair");
        return Err(Error::NotAdmissible(l, k, r));
    }
    let eval = |x: &[f64]| -> Result<Evaluation> {
        let u = Displacement::from_flat(dim, x)?;
        evaluate(host, &u, &model, &problem.ensemble)
    };

    let mut x = problem.initial.to_flat();
    let mut current = eval(&x)?;
    let mut g = current.gradient.to_flat();
    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut trajectory = vec![TrajectoryPoint {
        iteration: 0,
        energy: current.energy,
        force_norm: current.force_norm(),
        gap_distance: current.gap_distance,
        level: current.level,
    }];
    let mut iterations = 0;
    while current.force_norm() > problem.force_tolerance {
        if iterations >= problem.max_iterations {
            return Err(Error::NoConvergence(format!(
                "relaxation stopped after {iterations} iterations with force {:e}",
                current.force_norm()
            )));
        }
        // Two-loop recursion.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.last() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut p: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &p);
        if !(slope < 0.0) {
            // Not a descent direction: restart from steepest descent.
            history.clear();
            p = g.iter().map(|v| -v).collect();
            slope = dot(&g, &p);
        }
        let step_len = sup_site_norm(&p, dim);
        let mut alpha = if step_len > MAX_STEP {
            MAX_STEP / step_len
        } else {
            1.0
        };
        let noise = 1e-12 * current.energy.abs().max(1.0);
        let mut accepted = None;
        let mut last_err = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + alpha * b).collect();
            let u = Displacement::from_flat(dim, &trial)?;
            let adm = check_admissible(host, &u, problem.admissibility);
            if !adm.admissible {
                if let Some((l, k, r)) = adm.worst {
                    last_err = Some(Error::NotAdmissible(l, k, r));
                }
                alpha *= 0.5;
                continue;
            }
            match eval(&trial) {
                Ok(e) => {
                    let g_new = e.gradient.to_flat();
                    let slope_new = dot(&g_new, &p);
                    let armijo = e.energy <= current.energy + ARMIJO * alpha * slope;
                    // Approximate Wolfe conditions once energy differences
                    // drown in rounding.
                    let approx_wolfe = e.energy <= current.energy + noise
                        && slope_new >= 0.9 * slope
                        && slope_new <= -0.8 * slope;
                    if armijo || approx_wolfe {
                        accepted = Some((trial, e, g_new));
                        break;
                    }
                }
                Err(
                    err @ (Error::Collision { .. }
                    | Error::DegenerateFermiLevel(_)
                    | Error::NotAdmissible(..)),
                ) => {
                    last_err = Some(err);
                }
                Err(err) => return Err(err),
            }
            alpha *= 0.5;
        }
        let Some((x_new, e_new, g_new)) = accepted else {
            return Err(last_err.unwrap_or_else(|| {
                Error::NoConvergence(format!(
                    "line search failed at iteration {iterations} with force {:e}",
                    current.force_norm()
                ))
            }));
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            history.push((s, y, 1.0 / sy));
            if history.len() > HISTORY {
                history.remove(0);
            }
        }
        x = x_new;
        g = g_new;
        current = e_new;
        iterations += 1;
        trajectory.push(TrajectoryPoint {
            iteration: iterations,
            energy: current.energy,
            force_norm: current.force_norm(),
            gap_distance: current.gap_distance,
            level: current.level,
        });
    }
    let mut u = Displacement::from_flat(dim, &x)?;
    if host.periodicity().is_some() {
        u = u.centered();
    }
    let stability = match &problem.stability {
        Some(cfg) => Some(stability_constant(host, &u, &model, &problem.ensemble, cfg)?),
        None => None,
    };
    Ok(RelaxResult {
        displacement: u,
        energy: current.energy,
        level: current.level,
        iterations,
        force_norm: current.force_norm(),
        stability,
        gap_distance: current.gap_distance,
        eigenvalues: current.spectrum.eigenvalues.clone(),
        trajectory,
    })
}

/// Hessian of the ensemble energy by central differences of analytic
/// gradients, symmetrised.
pub fn hessian(
    host: &impl Geometry,
    u: &Displacement,
    model: &HoppingModel,
    ensemble: &Ensemble,
    step: f64,
) -> Result<DMatrix<f64>> {
    let dim = host.dim();
    let x = u.to_flat();
    let n = x.len();
    let mut hm = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut xp = x.clone();
        xp[j] += step;
        let gp = evaluate(host, &Displacement::from_flat(dim, &xp)?, model, ensemble)?
            .gradient
            .to_flat();
        xp[j] -= 2.0 * step;
        let gm = evaluate(host, &Displacement::from_flat(dim, &xp)?, model, ensemble)?
            .gradient
            .to_flat();
        for i in 0..n {
            hm[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    Ok((&hm + hm.transpose()) * 0.5)
}

/// Orthonormal basis of the complement of uniform translations, built from
/// Helmert contrasts per direction.
fn translation_complement(n_sites: usize, dim: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(n_sites * dim, (n_sites - 1) * dim);
    for i in 0..dim {
        for k in 1..n_sites {
            let col = i * (n_sites - 1) + (k - 1);
            let norm = ((k * (k + 1)) as f64).sqrt();
            for j in 0..k {
                q[(j * dim + i, col)] = 1.0 / norm;
            }
            q[(k * dim + i, col)] = -(k as f64) / norm;
        }
    }
    q
}

/// Smallest generalised eigenvalue of (Hessian, seminorm Gram matrix) on the
/// complement of translations.
pub fn stability_constant(
    host: &impl Geometry,
    u: &Displacement,
    model: &HoppingModel,
    ensemble: &Ensemble,
    cfg: &SeminormConfig,
) -> Result<f64> {
    let e = evaluate(host, u, model, ensemble)?;
    if e.force_norm() > 1e-5 {
        return Err(Error::Invalid(format!(
            "stability needs a stationary point, force norm is {:e}",
            e.force_norm()
        )));
    }
    let k = hessian(host, u, model, ensemble, 1e-5)?;
    let g = seminorm_gram(host, cfg);
    let q = translation_complement(host.n_sites(), host.dim());
    let kq = q.transpose() * k * &q;
    let gq = q.transpose() * g * &q;
    let chol = gq
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("seminorm Gram matrix is not positive definite".into()))?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(gq.nrows(), gq.nrows()))
        .ok_or_else(|| Error::Singular("Cholesky factor".into()))?;
    let c = &l_inv * kq * l_inv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let min = c
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(min)
}

/// `H v` for a uniform translation `v`; zero on tori up to differencing
/// error.
pub fn translation_residual(hessian: &DMatrix<f64>, n_sites: usize, dim: usize) -> f64 {
    (0..dim)
        .map(|i| {
            let v = DVector::from_fn(n_sites * dim, |r, _| if r % dim == i { 1.0 } else { 0.0 });
            (hessian * v).amax()
        })
        .fold(0.0, f64::max)
}

/// Default force tolerance for relaxations.
pub const DEFAULT_FORCE_TOL: f64 = 1e-8;

/// Grand-canonical ensemble at zero temperature; a frequent default.
pub fn zero_temperature_gce(mu: f64) -> Ensemble {
    Ensemble::GrandCanonical {
        mu,
        beta: Beta::Infinite,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{torus_of_cells, DefectSpec, ReferenceCrystal};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn helmert_basis_is_orthonormal() {
        let q = translation_complement(5, 2);
        let gram = q.transpose() * &q;
        assert!((gram - DMatrix::identity(8, 8)).amax() < 1e-14);
        let t = DVector::from_fn(10, |r, _| if r % 2 == 0 { 1.0 } else { 0.0 });
        assert!((q.transpose() * t).amax() < 1e-14);
    }

    #[test]
    fn perfect_crystal_is_stationary() {
        let cell = torus_of_cells(&ReferenceCrystal::two_species_chain(), None, &[6]).unwrap();
        let model = HoppingModel::default_insulator();
        for ens in [
            zero_temperature_gce(0.0),
            Ensemble::Canonical {
                electrons: 12.0,
                beta: Beta::Finite(10.0),
            },
        ] {
            let f = forces(&cell, &Displacement::zeros_for(&cell), &model, &ens).unwrap();
            assert!(f.max_norm() < 1e-12, "{}", f.max_norm());
        }
    }

    #[test]
    fn forces_match_finite_differences() {
        let defect = DefectSpec::vacancy(vec![0.0], 0.5);
        let cell = torus_of_cells(&ReferenceCrystal::two_species_chain(), Some(&defect), &[4]).unwrap();
        let model = HoppingModel::default_insulator();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let flat: Vec<f64> = (0..cell.len()).map(|_| rng.random_range(-0.05..0.05)).collect();
        let u = Displacement::from_flat(1, &flat).unwrap();
        let n_e = 2.0 * 3.0 + 1.0;
        for ens in [
            Ensemble::GrandCanonical {
                mu: 0.8,
                beta: Beta::Finite(10.0),
            },
            Ensemble::Canonical {
                electrons: n_e + 0.4,
                beta: Beta::Finite(10.0),
            },
        ] {
            let g = evaluate(&cell, &u, &model, &ens).unwrap().gradient;
            let sum: f64 = g.values().iter().map(|v| v[0]).sum();
            assert!(sum.abs() < 1e-12);
            for j in 0..cell.len() {
                let mut p = flat.clone();
                p[j] += 1e-5;
                let ep = energy(&cell, &Displacement::from_flat(1, &p).unwrap(), &model, &ens).unwrap();
                p[j] -= 2e-5;
                let em = energy(&cell, &Displacement::from_flat(1, &p).unwrap(), &model, &ens).unwrap();
                let fd = (ep - em) / 2e-5;
                let a = g.get(j)[0];
                assert!(
                    (a - fd).abs() <= 1e-6 * a.abs().max(1e-3),
                    "{ens:?} site {j}: {a} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn relax_from_equilibrium_takes_no_steps() {
        let cell = torus_of_cells(&ReferenceCrystal::two_species_chain(), None, &[5]).unwrap();
        let model = HoppingModel::default_insulator();
        let r = relax_geometry(&RelaxProblem::new(&cell, &model, zero_temperature_gce(0.0))).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.displacement.max_norm(), 0.0);
    }
}
