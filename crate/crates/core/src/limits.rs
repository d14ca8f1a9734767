//! Drivers for the zero-temperature and thermodynamic limit studies:
//! warm-started temperature sweeps, supercell sweeps, the canonical
//! electron-number policy and spectral pollution counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::fit::{fit_rate, RateFit, RateModel};
use crate::hamiltonian::{assemble, HoppingModel};
use crate::lattice::{
    stencil_seminorm, stencil_seminorm_on, torus_of_cells, DefectSpec, Displacement, Geometry,
    ReferenceCrystal, SeminormConfig, TorusCell, POSITION_TOL,
};
use crate::relax::{relax_geometry, RelaxProblem, RelaxResult};
use crate::spectrum::{band_structure, defect_state_count, eigendecompose, BandStructure};
use crate::thermo::{particle_number, solve_fermi_level, Beta, Ensemble, FermiCase};

/// Errors at or below this multiple of the force tolerance are treated as
/// solver noise and left out of rate fits.
pub const NOISE_FACTOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Beta,
    Radius,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceSeries {
    pub axis: Axis,
    pub parameters: Vec<f64>,
    /// Stencil-seminorm displacement errors.
    pub displacement_errors: Vec<f64>,
    pub energy_errors: Vec<f64>,
    /// Canonical runs only.
    pub level_errors: Vec<f64>,
    /// `dist(level, sigma)` at each point.
    pub gap_distances: Vec<f64>,
    pub displacement_fit: Option<RateFit>,
    pub energy_fit: Option<RateFit>,
    pub level_fit: Option<RateFit>,
    /// `dist(level, sigma(H(u_ref)))` of the reference solution.
    pub reference_gap_distance: f64,
    pub noise_floor: f64,
    pub complete: bool,
    pub failure: Option<String>,
}

impl ConvergenceSeries {
    fn empty(axis: Axis, noise_floor: f64, reference_gap_distance: f64) -> Self {
        ConvergenceSeries {
            axis,
            parameters: vec![],
            displacement_errors: vec![],
            energy_errors: vec![],
            level_errors: vec![],
            gap_distances: vec![],
            displacement_fit: None,
            energy_fit: None,
            level_fit: None,
            reference_gap_distance,
            noise_floor,
            complete: true,
            failure: None,
        }
    }

    /// Errors above the noise floor, with their parameters.
    pub fn resolved(&self, errors: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.parameters
            .iter()
            .zip(errors)
            .filter(|(_, &e)| e > self.noise_floor)
            .map(|(p, e)| (*p, *e))
            .unzip()
    }
}

fn fit_resolved(series: &ConvergenceSeries, errors: &[f64], model: RateModel) -> Option<RateFit> {
    let (p, e) = series.resolved(errors);
    fit_rate(&p, &e, model).ok()
}

fn check_grid(values: &[f64]) -> Result<()> {
    if values.len() < 4 {
        return Err(Error::Invalid("a sweep needs at least 4 values".into()));
    }
    if values.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Invalid("sweep values must be strictly ascending".into()));
    }
    Ok(())
}

fn with_beta(ensemble: &Ensemble, beta: Beta) -> Ensemble {
    match *ensemble {
        Ensemble::Canonical { electrons, .. } => Ensemble::Canonical { electrons, beta },
        Ensemble::GrandCanonical { mu, .. } => Ensemble::GrandCanonical { mu, beta },
    }
}

/// Relaxation settings shared by the sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub force_tolerance: f64,
    pub max_iterations: usize,
    pub seminorm: SeminormConfig,
}

impl SweepSettings {
    pub fn for_crystal(crystal: &ReferenceCrystal) -> Self {
        SweepSettings {
            force_tolerance: 1e-11,
            max_iterations: 2000,
            seminorm: SeminormConfig::for_crystal(crystal),
        }
    }
}

fn relax<G: Geometry>(
    host: &G,
    model: &HoppingModel,
    ensemble: Ensemble,
    start: Option<&Displacement>,
    s: &SweepSettings,
) -> Result<RelaxResult> {
    let mut p = RelaxProblem::new(host, model, ensemble);
    p.force_tolerance = s.force_tolerance;
    p.max_iterations = s.max_iterations;
    if let Some(u) = start {
        p.initial = u.clone();
    }
    relax_geometry(&p)
}

/// Relaxes at `beta = inf`, then at every `beta` of the grid warm-started
/// from that solution, and records errors against it. A grid value of
/// infinity is the self-comparison.
pub fn sweep_beta<G: Geometry>(
    host: &G,
    model: &HoppingModel,
    ensemble: &Ensemble,
    betas: &[f64],
    settings: &SweepSettings,
) -> Result<(ConvergenceSeries, RelaxResult)> {
    check_grid(betas)?;
    let reference = relax(host, model, with_beta(ensemble, Beta::Infinite), None, settings)?;
    let mut series = ConvergenceSeries::empty(
        Axis::Beta,
        NOISE_FACTOR * settings.force_tolerance,
        reference.gap_distance,
    );
    let canonical = matches!(ensemble, Ensemble::Canonical { .. });
    for &b in betas {
        let beta = Beta::new(b)?;
        let result = if beta.is_infinite() {
            Ok(reference.clone())
        } else {
            relax(
                host,
                model,
                with_beta(ensemble, beta),
                Some(&reference.displacement),
                settings,
            )
        };
        let r = match result {
            Ok(r) => r,
            Err(e) => {
                series.complete = false;
                series.failure = Some(format!("beta = {b}: {e}"));
                break;
            }
        };
        let diff = r.displacement.sub(&reference.displacement);
        series.parameters.push(b);
        series
            .displacement_errors
            .push(stencil_seminorm(host, &diff, &settings.seminorm));
        series.energy_errors.push((r.energy - reference.energy).abs());
        if canonical {
            series.level_errors.push((r.level - reference.level).abs());
        }
        series.gap_distances.push(r.gap_distance);
    }
    series.displacement_fit = fit_resolved(&series, &series.displacement_errors, RateModel::Exponential);
    series.energy_fit = fit_resolved(&series, &series.energy_errors, RateModel::Exponential);
    if canonical {
        series.level_fit = fit_resolved(&series, &series.level_errors, RateModel::Exponential);
    }
    Ok((series, reference))
}

/// One relaxed torus of a radius sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RadiusPoint {
    pub cells: i64,
    pub n_sites: usize,
    pub result: RelaxResult,
    /// Eigenvalues farther than `delta` from the reference bands.
    pub defect_levels: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RadiusSeries {
    pub series: ConvergenceSeries,
    pub points: Vec<RadiusPoint>,
    /// `||D(u_R - u_2R)||` over the core of the smaller torus, for
    /// consecutive grid points.
    pub successive_errors: Vec<f64>,
    /// Largest shift of a defect level between consecutive grid points.
    pub defect_level_drift: Vec<f64>,
}

fn torus(crystal: &ReferenceCrystal, defect: Option<&DefectSpec>, cells: i64) -> Result<TorusCell> {
    torus_of_cells(crystal, defect, &vec![cells; crystal.dim()])
}

/// Core seminorm `||D(u_small - u_big)||` over sites of the smaller torus
/// inside `B_{R/2}`, with `R` its domain radius.
pub fn common_core_error(
    small: &TorusCell,
    u_small: &Displacement,
    big: &TorusCell,
    u_big: &Displacement,
    cfg: &SeminormConfig,
) -> Result<f64> {
    let core = 0.5 * small.domain_radius;
    let n = small.len();
    let mut mask = vec![false; n];
    let mut diff = Displacement::zeros(n, small.config.dim());
    for (i, s) in small.config.sites.iter().enumerate() {
        if s.position.norm() > core {
            continue;
        }
        let j = big
            .config
            .sites
            .iter()
            .position(|t| (t.position - s.position).norm() < POSITION_TOL)
            .ok_or_else(|| Error::Invalid("core site missing from the larger torus".into()))?;
        mask[i] = true;
        diff.set(i, u_small.get(i) - u_big.get(j));
    }
    Ok(stencil_seminorm_on(small, &diff, cfg, Some(&mask)))
}

/// Eigenvalues of the relaxed configuration that lie in gaps of the
/// reference bands, farther than `delta` from them.
fn gap_levels(eigenvalues: &[f64], bands: &BandStructure, delta: f64) -> Result<Vec<f64>> {
    Ok(defect_state_count(eigenvalues, bands, delta)?.1)
}

/// Relaxes the grand-canonical problem on tori of increasing size and
/// compares each against the largest one on the common core.
#[allow(clippy::too_many_arguments)]
pub fn sweep_radius(
    crystal: &ReferenceCrystal,
    defect: Option<&DefectSpec>,
    model: &HoppingModel,
    mu: f64,
    beta: Beta,
    cells: &[i64],
    settings: &SweepSettings,
    bands: &BandStructure,
    delta: f64,
) -> Result<RadiusSeries> {
    let grid: Vec<f64> = cells.iter().map(|&c| c as f64).collect();
    check_grid(&grid)?;
    let gap = bands.require_gap()?;
    if !bands.gaps.iter().any(|g| g.lower < mu && mu < g.upper) {
        return Err(Error::Invalid(format!(
            "mu = {mu} is not inside a reference band gap (widest gap [{}, {}])",
            gap.lower, gap.upper
        )));
    }
    let ensemble = Ensemble::GrandCanonical { mu, beta };
    let mut points = Vec::new();
    let mut tori = Vec::new();
    let mut failure = None;
    for &c in cells {
        let t = torus(crystal, defect, c)?;
        match relax(&t, model, ensemble, None, settings) {
            Ok(r) => {
                let defect_levels = gap_levels(&r.eigenvalues, bands, delta)?;
                points.push(RadiusPoint {
                    cells: c,
                    n_sites: t.len(),
                    result: r,
                    defect_levels,
                });
                tori.push(t);
            }
            Err(e) => {
                failure = Some(format!("cells = {c}: {e}"));
                break;
            }
        }
    }
    let reference_gap = points.last().map_or(f64::NAN, |p| p.result.gap_distance);
    let mut series = ConvergenceSeries::empty(
        Axis::Radius,
        NOISE_FACTOR * settings.force_tolerance,
        reference_gap,
    );
    series.complete = failure.is_none();
    series.failure = failure;
    if let (Some(big), Some(last)) = (tori.last(), points.last()) {
        for (t, p) in tori.iter().zip(&points) {
            series.parameters.push(t.domain_radius);
            series.displacement_errors.push(common_core_error(
                t,
                &p.result.displacement,
                big,
                &last.result.displacement,
                &settings.seminorm,
            )?);
            series.energy_errors.push(0.0);
            series.gap_distances.push(p.result.gap_distance);
        }
    }
    // The final point is the reference itself; fit the others.
    let n = series.parameters.len().saturating_sub(1);
    let fit_series = ConvergenceSeries {
        parameters: series.parameters[..n].to_vec(),
        ..series.clone()
    };
    series.displacement_fit = fit_resolved(
        &fit_series,
        &series.displacement_errors[..n],
        RateModel::Algebraic,
    );
    let mut successive_errors = Vec::new();
    let mut defect_level_drift = Vec::new();
    for i in 1..points.len() {
        successive_errors.push(common_core_error(
            &tori[i - 1],
            &points[i - 1].result.displacement,
            &tori[i],
            &points[i].result.displacement,
            &settings.seminorm,
        )?);
        let (a, b) = (&points[i - 1].defect_levels, &points[i].defect_levels);
        let drift = if a.len() == b.len() && !a.is_empty() {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        } else if a.is_empty() && b.is_empty() {
            0.0
        } else {
            f64::NAN
        };
        defect_level_drift.push(drift);
    }
    Ok(RadiusSeries {
        series,
        points,
        successive_errors,
        defect_level_drift,
    })
}

/// Adjacent eigenvalues `lower < mu < upper`.
pub fn bracketing_levels(eigenvalues: &[f64], mu: f64) -> Result<(f64, f64)> {
    let lower = eigenvalues
        .iter()
        .copied()
        .filter(|&l| l < mu)
        .fold(f64::NEG_INFINITY, f64::max);
    let upper = eigenvalues
        .iter()
        .copied()
        .filter(|&l| l > mu)
        .fold(f64::INFINITY, f64::min);
    if !lower.is_finite() || !upper.is_finite() {
        return Err(Error::Invalid(format!("no eigenvalues on both sides of {mu}")));
    }
    Ok((lower, upper))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShiftedCount {
    pub shift: f64,
    pub electrons: f64,
    pub level: f64,
    pub case: FermiCase,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CeLimitPoint {
    pub cells: i64,
    pub lower: f64,
    pub upper: f64,
    pub electrons: f64,
    pub fermi_level: f64,
    pub case: FermiCase,
    pub distance_to_nu: f64,
    pub shifted: Vec<ShiftedCount>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CeLimitSeries {
    /// `1/2 (lower + upper)` on the reference torus.
    pub nu: f64,
    pub reference_cells: i64,
    pub points: Vec<CeLimitPoint>,
}

/// Electron-count shifts rerun at every supercell size.
pub const COUNT_SHIFTS: [f64; 6] = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];

/// Zero-temperature canonical Fermi levels under the electron-number policy
/// `N_e,R = N^inf(u_R; nu)`, where `u_R` solves the grand-canonical problem
/// and `nu` is the mid-gap level of a reference torus of `reference_cells`
/// cells, standing in for the infinite crystal.
pub fn ce_limit_study(
    crystal: &ReferenceCrystal,
    defect: Option<&DefectSpec>,
    model: &HoppingModel,
    mu: f64,
    cells: &[i64],
    reference_cells: i64,
    settings: &SweepSettings,
) -> Result<CeLimitSeries> {
    let ensemble = Ensemble::GrandCanonical {
        mu,
        beta: Beta::Infinite,
    };
    let mut relaxed = Vec::new();
    for &c in cells.iter().chain(std::iter::once(&reference_cells)) {
        let t = torus(crystal, defect, c)?;
        let r = relax(&t, model, ensemble, None, settings)?;
        relaxed.push((c, r));
    }
    ce_limit_from_relaxed(&relaxed, mu)
}

/// The canonical study on already relaxed grand-canonical solutions; the
/// last entry is the reference.
pub fn ce_limit_from_relaxed(relaxed: &[(i64, RelaxResult)], mu: f64) -> Result<CeLimitSeries> {
    let Some(((reference_cells, reference), rest)) = relaxed.split_last() else {
        return Err(Error::Invalid("no supercells".into()));
    };
    let (lo, hi) = bracketing_levels(&reference.eigenvalues, mu)?;
    let nu = 0.5 * (lo + hi);
    let mut points = Vec::new();
    for (c, r) in rest {
        let eigs = &r.eigenvalues;
        let (lower, upper) = bracketing_levels(eigs, mu)?;
        let electrons = particle_number(eigs, Beta::Infinite, nu);
        let sol = solve_fermi_level(eigs, electrons, Beta::Infinite)?;
        let mut shifted = Vec::new();
        for s in COUNT_SHIFTS {
            let n = electrons + s;
            let alt = solve_fermi_level(eigs, n, Beta::Infinite)?;
            shifted.push(ShiftedCount {
                shift: s,
                electrons: n,
                level: alt.level,
                case: alt.case.expect("zero temperature"),
                lower: alt.lower.expect("zero temperature"),
                upper: alt.upper.expect("zero temperature"),
            });
        }
        points.push(CeLimitPoint {
            cells: *c,
            lower,
            upper,
            electrons,
            fermi_level: sol.level,
            case: sol.case.expect("zero temperature"),
            distance_to_nu: (sol.level - nu).abs(),
            shifted,
        });
    }
    Ok(CeLimitSeries {
        nu,
        reference_cells: *reference_cells,
        points,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisplacementPolicy {
    /// Undisplaced reference positions.
    Zero,
    /// Relaxed grand-canonical solutions.
    Relaxed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PollutionPoint {
    pub cells: i64,
    pub count: usize,
    pub eigenvalues: Vec<f64>,
}

/// Counts eigenvalues outside `B_delta(sigma(H^ref))` on tori of increasing
/// size.
#[allow(clippy::too_many_arguments)]
pub fn pollution_study(
    crystal: &ReferenceCrystal,
    defect: Option<&DefectSpec>,
    model: &HoppingModel,
    mu: f64,
    cells: &[i64],
    delta: f64,
    policy: DisplacementPolicy,
    bands: &BandStructure,
    settings: &SweepSettings,
) -> Result<Vec<PollutionPoint>> {
    let mut out = Vec::new();
    for &c in cells {
        let t = torus(crystal, defect, c)?;
        let eigs = match policy {
            DisplacementPolicy::Zero => {
                eigendecompose(&assemble(&t, &Displacement::zeros_for(&t), model)?)?.eigenvalues
            }
            DisplacementPolicy::Relaxed => {
                relax(
                    &t,
                    model,
                    Ensemble::GrandCanonical {
                        mu,
                        beta: Beta::Infinite,
                    },
                    None,
                    settings,
                )?
                .eigenvalues
            }
        };
        let (count, eigenvalues) = defect_state_count(&eigs, bands, delta)?;
        out.push(PollutionPoint {
            cells: c,
            count,
            eigenvalues,
        });
    }
    Ok(out)
}

/// Reference band structure used by the studies.
pub fn reference_bands(crystal: &ReferenceCrystal, model: &HoppingModel) -> Result<BandStructure> {
    band_structure(crystal, model, 256)
}
