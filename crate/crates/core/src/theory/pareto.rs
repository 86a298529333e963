//! Pareto degrees and Monte Carlo moment estimates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Trials per independent generator stream.
pub(crate) const CHUNK: usize = 1 << 14;

pub(crate) fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParetoParams {
    pub alpha: f64,
    pub x_m: f64,
}

impl ParetoParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Precondition(format!("Pareto tail index must be > 0, got {alpha}")));
        }
        Ok(Self { alpha, x_m: 1.0 })
    }

    /// `alpha x_m / (alpha - 1)`, finite for `alpha > 1`.
    pub fn mean(&self) -> Option<f64> {
        (self.alpha > 1.0).then(|| self.alpha * self.x_m / (self.alpha - 1.0))
    }

    /// `alpha x_m^2 / ((alpha - 1)^2 (alpha - 2))`, finite for `alpha > 2`.
    pub fn variance(&self) -> Option<f64> {
        let a = self.alpha;
        (a > 2.0).then(|| a * self.x_m * self.x_m / ((a - 1.0).powi(2) * (a - 2.0)))
    }

    /// `E[x^-s] = alpha / (alpha + s)` for `x_m = 1`, `s > -alpha`.
    pub fn inverse_moment(&self, s: f64) -> f64 {
        self.alpha / (self.alpha + s) * self.x_m.powf(-s)
    }

    /// Inverse-CDF transform of `u` in (0, 1].
    pub fn quantile_upper(&self, u: f64) -> f64 {
        self.x_m * u.powf(-1.0 / self.alpha)
    }
}

/// `x_m * U^{-1/alpha}` with `U` uniform on (0, 1].
pub fn pareto_sample<R: Rng + ?Sized>(params: &ParetoParams, rng: &mut R) -> f64 {
    let u = 1.0 - rng.random::<f64>();
    params.quantile_upper(u)
}

/// A Pareto draw rounded up to an integer node degree (at least 1).
pub fn pareto_degree<R: Rng + ?Sized>(params: &ParetoParams, rng: &mut R) -> usize {
    (pareto_sample(params, rng).ceil() as usize).max(1)
}

/// Streaming mean and variance (Welford), mergeable in order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        let n = (self.count + other.count) as f64;
        let d = other.mean - self.mean;
        self.mean += d * other.count as f64 / n;
        self.m2 += other.m2 + d * d * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        (self.variance() / self.count as f64).sqrt()
    }
}

/// Runs `trial` `trials` times over seeded chunks and merges the per-chunk
/// moments in chunk order, so the result does not depend on `exec`.
pub fn monte_carlo<F>(trials: usize, seed: u64, exec: Exec, trial: F) -> Moments
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync + Send,
{
    let chunks = trials.div_ceil(CHUNK);
    let parts = exec.map(chunks, |c| {
        let mut rng = chunk_rng(seed, c);
        let n = CHUNK.min(trials - c * CHUNK);
        let mut m = Moments::default();
        for _ in 0..n {
            m.push(trial(&mut rng));
        }
        m
    });
    parts.iter().fold(Moments::default(), |mut acc, m| {
        acc.merge(m);
        acc
    })
}

/// Sample mean and variance of `draws` Pareto variates.
pub fn pareto_moments(params: &ParetoParams, draws: usize, seed: u64, exec: Exec) -> Moments {
    monte_carlo(draws, seed, exec, |rng| pareto_sample(params, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_quantile() {
        let p = ParetoParams::new(3.0).unwrap();
        assert_eq!(p.quantile_upper(1.0), 1.0);
    }

    #[test]
    fn formulas_at_three() {
        let p = ParetoParams::new(3.0).unwrap();
        assert_eq!(p.mean(), Some(1.5));
        assert_eq!(p.variance(), Some(0.75));
        assert!(ParetoParams::new(2.0).unwrap().variance().is_none());
        assert!(ParetoParams::new(0.0).is_err());
    }

    #[test]
    fn degrees_at_least_one() {
        let p = ParetoParams::new(1.2).unwrap();
        let mut rng = chunk_rng(3, 0);
        assert!((0..10_000).all(|_| pareto_degree(&p, &mut rng) >= 1));
    }

    #[test]
    fn welford_merge_matches_single_pass() {
        let xs: Vec<f64> = (0..1000).map(|k| ((k * 37) % 101) as f64 / 7.0).collect();
        let mut whole = Moments::default();
        xs.iter().for_each(|&x| whole.push(x));
        let mut a = Moments::default();
        let mut b = Moments::default();
        xs[..333].iter().for_each(|&x| a.push(x));
        xs[333..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert!((a.mean - whole.mean).abs() < 1e-12);
        assert!((a.variance() - whole.variance()).abs() < 1e-10);
    }

    #[test]
    fn exec_independent() {
        let p = ParetoParams::new(3.0).unwrap();
        let s = pareto_moments(&p, 100_000, 9, Exec::Sequential);
        let q = pareto_moments(&p, 100_000, 9, Exec::Parallel);
        assert_eq!(s, q);
    }
}
