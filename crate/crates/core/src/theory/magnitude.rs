//! Second moment of a propagated coordinate as a function of node degree.
//!
//! One propagation step gives item `i` with `D` neighbours
//! `q_i = sum_u p_u / (D^alpha0 * d_u^alpha1)`, where the user degrees `d_u`
//! are Pareto(alpha) and the scalar embeddings `p_u` are Normal(mu0, sigma0).
//! Then `E[q_i^2] = a D^{1 - 2 alpha0} + b D^{2 - 2 alpha0}`.

use rand_distr::{Distribution, Normal};

use super::pareto::{monte_carlo, pareto_sample, Moments, ParetoParams};
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MagnitudeModel {
    pub alpha0: f64,
    pub alpha1: f64,
    pub mu0: f64,
    pub sigma0: f64,
    pub a: f64,
    pub b: f64,
}

/// `(a, b)` for tail index `alpha`; requires `alpha > max(2, 2 alpha1)`.
pub fn coefficients(alpha1: f64, mu0: f64, sigma0: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 2.0 && alpha > 2.0 * alpha1) {
        return Err(Error::Precondition(format!(
            "tail index {alpha} must exceed max(2, 2 * alpha1 = {})",
            2.0 * alpha1
        )));
    }
    let mean_term = (alpha / (alpha + alpha1)).powi(2) * mu0 * mu0;
    let a = alpha / (alpha + 2.0 * alpha1) * (sigma0 * sigma0 + mu0 * mu0) - mean_term;
    Ok((a, mean_term))
}

impl MagnitudeModel {
    pub fn new(alpha0: f64, alpha1: f64, mu0: f64, sigma0: f64, alpha: f64) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite() && mu0.is_finite()) {
            return Err(Error::Precondition("sigma0 must be positive and mu0 finite".into()));
        }
        let (a, b) = coefficients(alpha1, mu0, sigma0, alpha)?;
        Ok(Self {
            alpha0,
            alpha1,
            mu0,
            sigma0,
            a,
            b,
        })
    }
}

/// `a D^{1 - 2 alpha0} + b D^{2 - 2 alpha0}` with `a, b` recomputed for `alpha`.
pub fn expected_sq_magnitude(model: &MagnitudeModel, alpha: f64, degree: f64) -> Result<f64> {
    if degree < 1.0 {
        return Err(Error::Precondition(format!("degree must be >= 1, got {degree}")));
    }
    let (a, b) = coefficients(model.alpha1, model.mu0, model.sigma0, alpha)?;
    Ok(a * degree.powf(1.0 - 2.0 * model.alpha0) + b * degree.powf(2.0 - 2.0 * model.alpha0))
}

fn contribution(model: &MagnitudeModel, pareto: &ParetoParams, normal: &Normal<f64>, degree: usize, rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let d_u = pareto_sample(pareto, rng);
    normal.sample(rng) / ((degree as f64).powf(model.alpha0) * d_u.powf(model.alpha1))
}

/// Monte Carlo estimate of `E[q_i^2]` at a fixed item degree, using
/// continuous (unrounded) Pareto user degrees.
pub fn simulate_sq_magnitude(
    model: &MagnitudeModel,
    alpha: f64,
    degree: usize,
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<Moments> {
    let pareto = ParetoParams::new(alpha)?;
    let normal = Normal::new(model.mu0, model.sigma0).map_err(|e| Error::Precondition(e.to_string()))?;
    Ok(monte_carlo(trials, seed, exec, |rng| {
        let q: f64 = (0..degree).map(|_| contribution(model, &pareto, &normal, degree, rng)).sum();
        q * q
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossCovariance {
    pub covariance: f64,
    pub std_error: f64,
}

/// Covariance between two neighbours' contributions to the same item.
pub fn neighbour_cross_covariance(model: &MagnitudeModel, alpha: f64, trials: usize, seed: u64, exec: Exec) -> Result<CrossCovariance> {
    let pareto = ParetoParams::new(alpha)?;
    let normal = Normal::new(model.mu0, model.sigma0).map_err(|e| Error::Precondition(e.to_string()))?;
    // Known means make the centred product an unbiased, i.i.d. estimator.
    let mean = model.mu0 * pareto.inverse_moment(model.alpha1) / 2f64.powf(model.alpha0);
    let m = monte_carlo(trials, seed, exec, |rng| {
        let c1 = contribution(model, &pareto, &normal, 2, rng);
        let c2 = contribution(model, &pareto, &normal, 2, rng);
        (c1 - mean) * (c2 - mean)
    });
    Ok(CrossCovariance {
        covariance: m.mean,
        std_error: m.std_error(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `ys` on `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    LinearFit {
        slope,
        intercept,
        r_squared: if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 },
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MagnitudePoint {
    pub degree: usize,
    pub expected: f64,
    pub empirical: Moments,
}

impl MagnitudePoint {
    pub fn relative_error(&self) -> f64 {
        (self.empirical.mean - self.expected).abs() / self.expected.abs()
    }

    /// Within 2% or within 3 standard errors.
    pub fn agrees(&self) -> bool {
        let diff = (self.empirical.mean - self.expected).abs();
        diff <= 0.02 * self.expected.abs() || diff <= 3.0 * self.empirical.std_error()
    }
}

/// Degrees 1, 2, 4, ..., 64.
pub const MAGNITUDE_DEGREES: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

pub fn magnitude_sweep(model: &MagnitudeModel, alpha: f64, degrees: &[usize], trials: usize, seed: u64, exec: Exec) -> Result<Vec<MagnitudePoint>> {
    degrees
        .iter()
        .enumerate()
        .map(|(k, &degree)| {
            Ok(MagnitudePoint {
                degree,
                expected: expected_sq_magnitude(model, alpha, degree as f64)?,
                empirical: simulate_sq_magnitude(model, alpha, degree, trials, seed.wrapping_add(k as u64 * 7919), exec)?,
            })
        })
        .collect()
}
