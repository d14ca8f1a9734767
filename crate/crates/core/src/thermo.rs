//! Fermi–Dirac statistics, particle numbers, Fermi levels, free energies and
//! grand potentials at finite and zero temperature.

use std::fmt;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Inverse temperature; zero temperature is an explicit case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Beta {
    Finite(f64),
    Infinite,
}

impl Beta {
    pub fn new(beta: f64) -> Result<Self> {
        if beta == f64::INFINITY {
            Ok(Beta::Infinite)
        } else if beta > 0.0 && beta.is_finite() {
            Ok(Beta::Finite(beta))
        } else {
            Err(Error::Invalid(format!("beta must be positive, got {beta}")))
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Beta::Infinite)
    }

    pub fn value(&self) -> f64 {
        match self {
            Beta::Finite(b) => *b,
            Beta::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Beta::Finite(b) => write!(f, "{b}"),
            Beta::Infinite => write!(f, "inf"),
        }
    }
}

impl Serialize for Beta {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Beta::Finite(b) => s.serialize_f64(*b),
            Beta::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(b) => Beta::new(b).map_err(de::Error::custom),
            Raw::Text(s) if matches!(s.as_str(), "inf" | "infinity" | "Infinity") => Ok(Beta::Infinite),
            Raw::Text(s) => s
                .parse::<f64>()
                .map_err(de::Error::custom)
                .and_then(|b| Beta::new(b).map_err(de::Error::custom)),
        }
    }
}

impl std::str::FromStr for Beta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inf" | "infinity" | "Infinity" => Ok(Beta::Infinite),
            _ => Beta::new(
                s.parse()
                    .map_err(|_| Error::Invalid(format!("cannot parse beta `{s}`")))?,
            ),
        }
    }
}

/// Canonical ensemble with a fixed electron count, or grand-canonical with a
/// fixed chemical potential.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Ensemble {
    Canonical { electrons: f64, beta: Beta },
    GrandCanonical { mu: f64, beta: Beta },
}

impl Ensemble {
    pub fn beta(&self) -> Beta {
        match self {
            Ensemble::Canonical { beta, .. } | Ensemble::GrandCanonical { beta, .. } => *beta,
        }
    }

    pub fn validate(&self, n_states: usize) -> Result<()> {
        match self {
            Ensemble::Canonical { electrons, .. } => check_electrons(*electrons, n_states),
            Ensemble::GrandCanonical { mu, .. } if !mu.is_finite() => {
                Err(Error::Invalid("chemical potential must be finite".into()))
            }
            _ => Ok(()),
        }
    }
}

fn check_electrons(n_e: f64, n_states: usize) -> Result<()> {
    let max = 2.0 * n_states as f64;
    if n_e > 0.0 && n_e < max {
        Ok(())
    } else {
        Err(Error::ElectronCount { electrons: n_e, max })
    }
}

/// `log(1 + e^y)` without overflow.
pub fn softplus(y: f64) -> f64 {
    y.max(0.0) + (-y.abs()).exp().ln_1p()
}

/// `1 / (1 + e^x)` without overflow.
pub fn logistic(x: f64) -> f64 {
    if x > 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// Eigenvalue `lambda` counts as equal to `tau` at zero temperature.
pub fn level_equal(lambda: f64, tau: f64) -> bool {
    (lambda - tau).abs() <= 1e-8 * lambda.abs().max(1.0)
}

/// Minimum distance from a chemical potential to the spectrum at zero
/// temperature.
pub const COLLISION_TOL: f64 = 1e-8;

/// Occupation `f_beta(eps)` and entropy `S(f) = f log f + (1-f) log(1-f)`.
pub fn fermi_dirac(beta: Beta, eps: f64) -> (f64, f64) {
    match beta {
        Beta::Infinite => {
            if eps < 0.0 {
                (1.0, 0.0)
            } else if eps > 0.0 {
                (0.0, 0.0)
            } else {
                (0.5, -std::f64::consts::LN_2)
            }
        }
        Beta::Finite(b) => {
            let x = b * eps;
            let f = logistic(x);
            // log f = -softplus(x), log(1-f) = -softplus(-x)
            let s = -f * softplus(x) - logistic(-x) * softplus(-x);
            (f, s)
        }
    }
}

/// Per-eigenvalue occupation `2 f_beta(lambda - tau)`; at zero temperature 2,
/// 1 or 0 for eigenvalues below, at or above `tau`.
pub fn occupation(beta: Beta, lambda: f64, tau: f64) -> f64 {
    match beta {
        Beta::Infinite => {
            if level_equal(lambda, tau) {
                1.0
            } else if lambda < tau {
                2.0
            } else {
                0.0
            }
        }
        Beta::Finite(b) => 2.0 * logistic(b * (lambda - tau)),
    }
}

/// `N(tau) = sum_s 2 f_beta(lambda_s - tau)`.
pub fn particle_number(eigenvalues: &[f64], beta: Beta, tau: f64) -> f64 {
    eigenvalues.iter().map(|&l| occupation(beta, l, tau)).sum()
}

/// `N(tau) - n_e`, split into an exact integer part and small tails so that
/// the sign stays meaningful deep inside a gap. When the tails underflow the
/// sign is decided by comparing their logarithms.
fn particle_residual(eigenvalues: &[f64], b: f64, tau: f64, n_e: f64) -> f64 {
    let below = eigenvalues.iter().filter(|&&l| l < tau).count();
    let integer = 2.0 * below as f64 - n_e;
    let mut tail = 0.0;
    for &l in eigenvalues {
        if l < tau {
            tail -= 2.0 * logistic(b * (tau - l));
        } else {
            tail += 2.0 * logistic(b * (l - tau));
        }
    }
    if integer != 0.0 || tail != 0.0 {
        return integer + tail;
    }
    // log of 2 f(x) is ln 2 - softplus(x).
    let log_sum = |xs: Vec<f64>| {
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            m
        } else {
            m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        }
    };
    let above = log_sum(
        eigenvalues
            .iter()
            .filter(|&&l| l >= tau)
            .map(|&l| -softplus(b * (l - tau)))
            .collect(),
    );
    let under = log_sum(
        eigenvalues
            .iter()
            .filter(|&&l| l < tau)
            .map(|&l| -softplus(b * (tau - l)))
            .collect(),
    );
    if above > under {
        f64::MIN_POSITIVE
    } else if above < under {
        -f64::MIN_POSITIVE
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FermiCase {
    LowerEdge,
    Midpoint,
    UpperEdge,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FermiSolution {
    pub level: f64,
    /// Zero temperature only.
    pub case: Option<FermiCase>,
    pub residual: f64,
    /// Adjacent eigenvalues bracketing the level (zero temperature only).
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// Solves `N(eps_F) = n_e`. Finite temperature bisects to machine precision;
/// zero temperature applies the three-case rule on the eigenvalue set.
pub fn solve_fermi_level(eigenvalues: &[f64], n_e: f64, beta: Beta) -> Result<FermiSolution> {
    if eigenvalues.is_empty() {
        return Err(Error::Invalid("empty spectrum".into()));
    }
    check_electrons(n_e, eigenvalues.len())?;
    let lo_e = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_e = eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    match beta {
        Beta::Finite(b) => {
            let (mut lo, mut hi) = (lo_e - 1.0, hi_e + 1.0);
            // Widen until bracketing; only needed at very small beta.
            let mut widen = 0;
            while particle_residual(eigenvalues, b, lo, n_e) > 0.0 && widen < 200 {
                lo -= (hi - lo).max(1.0);
                widen += 1;
            }
            while particle_residual(eigenvalues, b, hi, n_e) < 0.0 && widen < 400 {
                hi += (hi - lo).max(1.0);
                widen += 1;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                let r = particle_residual(eigenvalues, b, mid, n_e);
                if r == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                } else if r < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let level = 0.5 * (lo + hi);
            let residual = (particle_number(eigenvalues, beta, level) - n_e).abs();
            if residual > 1e-10 * n_e.max(1.0) {
                return Err(Error::NoConvergence(format!(
                    "Fermi level bisection residual {residual:e}"
                )));
            }
            Ok(FermiSolution {
                level,
                case: None,
                residual,
                lower: None,
                upper: None,
            })
        }
        Beta::Infinite => {
            let n_inf = |t: f64| particle_number(eigenvalues, Beta::Infinite, t);
            let lower = eigenvalues
                .iter()
                .copied()
                .filter(|&l| n_inf(l) <= n_e)
                .fold(None, |acc: Option<f64>, l| Some(acc.map_or(l, |a| a.max(l))));
            let upper = eigenvalues
                .iter()
                .copied()
                .filter(|&l| n_inf(l) >= n_e)
                .fold(None, |acc: Option<f64>, l| Some(acc.map_or(l, |a| a.min(l))));
            let (lower, upper) = match (lower, upper) {
                (Some(a), Some(b)) => (a, b),
                (Some(a), None) => (a, a),
                (None, Some(b)) => (b, b),
                (None, None) => unreachable!("spectrum is nonempty"),
            };
            let mid = 0.5 * (lower + upper);
            let n_mid = n_inf(mid);
            let (level, case) = if n_mid > n_e + 1e-12 {
                (lower, FermiCase::LowerEdge)
            } else if n_mid < n_e - 1e-12 {
                (upper, FermiCase::UpperEdge)
            } else {
                (mid, FermiCase::Midpoint)
            };
            Ok(FermiSolution {
                level,
                case: Some(case),
                residual: (n_inf(level) - n_e).abs(),
                lower: Some(lower),
                upper: Some(upper),
            })
        }
    }
}

/// Energy per eigenvalue `e_beta(lambda; tau) = 2 tau f + (2/beta) log(1 - f)`.
pub fn energy_density(beta: Beta, lambda: f64, tau: f64) -> f64 {
    match beta {
        Beta::Infinite => {
            if level_equal(lambda, tau) {
                lambda
            } else if lambda < tau {
                2.0 * lambda
            } else {
                0.0
            }
        }
        Beta::Finite(b) => {
            let x = b * (lambda - tau);
            2.0 * tau * logistic(x) - 2.0 / b * softplus(-x)
        }
    }
}

/// Helmholtz free energy `sum_s e_beta(lambda_s; eps_F)`.
pub fn helmholtz_energy(eigenvalues: &[f64], beta: Beta, fermi_level: f64) -> f64 {
    eigenvalues
        .iter()
        .map(|&l| energy_density(beta, l, fermi_level))
        .sum()
}

/// Grand-potential density `g_beta(lambda; mu) = (2/beta) log(1 - f)`; at
/// zero temperature `2 (lambda - mu)` below `mu` and 0 above.
pub fn grand_density(beta: Beta, lambda: f64, mu: f64) -> f64 {
    match beta {
        Beta::Infinite => {
            if lambda < mu {
                2.0 * (lambda - mu)
            } else {
                0.0
            }
        }
        Beta::Finite(b) => -2.0 / b * softplus(-b * (lambda - mu)),
    }
}

/// Fails when `mu` lies within the collision tolerance of the spectrum.
pub fn check_collision(eigenvalues: &[f64], mu: f64) -> Result<f64> {
    let d = eigenvalues
        .iter()
        .map(|l| (l - mu).abs())
        .fold(f64::INFINITY, f64::min);
    if d < COLLISION_TOL {
        Err(Error::Collision { mu, distance: d })
    } else {
        Ok(d)
    }
}

/// `G(mu) = sum_s g_beta(lambda_s; mu)`.
pub fn grand_potential(eigenvalues: &[f64], beta: Beta, mu: f64) -> Result<f64> {
    if beta.is_infinite() {
        check_collision(eigenvalues, mu)?;
    }
    Ok(eigenvalues.iter().map(|&l| grand_density(beta, l, mu)).sum())
}
