//! Least-squares rate fits on logarithmic errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordinary least squares `y ≈ slope x + intercept`, with the coefficient of
/// determination.
pub fn linear_regression(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::Invalid("regression inputs differ in length".into()));
    }
    if n < 2 {
        return Err(Error::TooFewPoints(n));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Invalid("regression abscissae are all equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - slope * a - intercept).powi(2))
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok((slope, intercept, r2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateModel {
    /// `err ≈ C e^{-rate x}`
    Exponential,
    /// `err ≈ C x^{-rate}`
    Algebraic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub rate: f64,
    pub prefactor: f64,
    pub r2: f64,
    pub points: usize,
}

/// Fits a decay rate over the strictly positive errors.
pub fn fit_rate(params: &[f64], errors: &[f64], model: RateModel) -> Result<RateFit> {
    if params.len() != errors.len() {
        return Err(Error::Invalid("parameters and errors differ in length".into()));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (&p, &e) in params.iter().zip(errors) {
        if e > 0.0 && e.is_finite() {
            x.push(match model {
                RateModel::Exponential => p,
                RateModel::Algebraic => {
                    if p <= 0.0 {
                        continue;
                    }
                    p.ln()
                }
            });
            y.push(e.ln());
        }
    }
    if x.len() < 3 {
        return Err(Error::TooFewPoints(x.len()));
    }
    let (slope, intercept, r2) = linear_regression(&x, &y)?;
    Ok(RateFit {
        rate: -slope,
        prefactor: intercept.exp(),
        r2,
        points: x.len(),
    })
}
