//! Per-negative gradient magnitude of the cosine sampled softmax loss.

use crate::error::{Error, Result};

const UNIT_TOLERANCE: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sqrt(1 - x^2) * exp(x / tau)`.
pub fn magnitude_law(x: f64, tau: f64) -> f64 {
    (1.0 - x * x).max(0.0).sqrt() * (x / tau).exp()
}

/// `c(j) = exp(x / tau) / Z_u * (I - s_u s_u^T) s_j`, the part of the user
/// gradient contributed by negative `j`, up to the shared `1 / tau`.
pub fn negative_grad_contribution(s_u: &[f64], s_j: &[f64], tau: f64, partition: f64) -> Result<Vec<f64>> {
    if s_u.len() != s_j.len() {
        return Err(Error::DimensionMismatch {
            expected: s_u.len(),
            actual: s_j.len(),
        });
    }
    for (name, v) in [("s_u", s_u), ("s_j", s_j)] {
        let n = dot(v, v).sqrt();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Precondition(format!("{name} has norm {n}, expected 1")));
        }
    }
    if !(partition > 0.0 && tau > 0.0) {
        return Err(Error::Precondition("partition and tau must be positive".into()));
    }
    let x = dot(s_u, s_j);
    let w = (x / tau).exp() / partition;
    Ok(s_j.iter().zip(s_u).map(|(j, u)| w * (j - x * u)).collect())
}

/// `||c(j)||`, checked against `magnitude_law(x, tau) / Z_u`. The two must
/// agree to 1e-10 relative to `max(1, exp(x / tau)) / Z_u`.
pub fn negative_grad_magnitude(s_u: &[f64], s_j: &[f64], tau: f64, partition: f64) -> Result<f64> {
    let c = negative_grad_contribution(s_u, s_j, tau, partition)?;
    let norm = dot(&c, &c).sqrt();
    let x = dot(s_u, s_j).clamp(-1.0, 1.0);
    let law = magnitude_law(x, tau) / partition;
    let scale = (x / tau).exp().max(1.0) / partition;
    if (norm - law).abs() > 1e-10 * scale {
        return Err(Error::Precondition(format!(
            "gradient magnitude {norm} disagrees with closed form {law}"
        )));
    }
    Ok(norm)
}

/// Stationary point of `sqrt(1 - x^2) e^{x / tau}` on (-1, 1):
/// the positive root of `x^2 + tau x - 1 = 0`.
pub fn hardest_cosine(tau: f64) -> f64 {
    (-tau + (tau * tau + 4.0).sqrt()) / 2.0
}

/// Grid maximizer of the magnitude law over `[-1, 1]`.
pub fn hardest_cosine_grid(tau: f64, points: usize) -> f64 {
    let step = 2.0 / (points - 1) as f64;
    (0..points)
        .map(|k| -1.0 + k as f64 * step)
        .map(|x| (x, magnitude_law(x, tau)))
        .fold((0.0, f64::NEG_INFINITY), |best, (x, v)| if v > best.1 { (x, v) } else { best })
        .0
}
