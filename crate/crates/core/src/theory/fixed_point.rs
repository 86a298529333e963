//! Optimal scores of the sampled softmax objective when every score is a
//! free parameter and negatives come from a fixed distribution.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `log_partition - ln(1 + N * |P_u| * p_n_i)`, where `log_partition` is
/// `ln(N * E_{j~p_n} exp f(u, j))`.
pub fn closed_form_score(p_n_i: f64, negatives: usize, pos_count: usize, log_partition: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&p_n_i) && negatives >= 1);
    log_partition - (negatives as f64 * pos_count as f64 * p_n_i).ln_1p()
}

/// `f*(a) - f*(b)` for two items of the same user; the partition cancels.
pub fn closed_form_difference(p_a: f64, p_b: f64, negatives: usize, pos_count: usize) -> f64 {
    closed_form_score(p_a, negatives, pos_count, 0.0) - closed_form_score(p_b, negatives, pos_count, 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub steps: usize,
    pub learning_rate: f64,
    /// Independent negative draws averaged into each step's gradient.
    pub replicates: usize,
    /// Gradient-norm bound, measured on the averaged table, below which the
    /// fit counts as converged.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            steps: 20_000,
            learning_rate: 0.5,
            replicates: 8,
            tolerance: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FreeScoreFit {
    /// `scores[u][i]`, averaged over the second half of the run.
    pub scores: Vec<Vec<f64>>,
    /// Monte Carlo estimate of the expected gradient norm at `scores`.
    pub grad_norm: f64,
    pub converged: bool,
}

impl FreeScoreFit {
    pub fn difference(&self, u: usize, a: usize, b: usize) -> f64 {
        self.scores[u][a] - self.scores[u][b]
    }
}

/// Minimizes the summed per-user sampled softmax loss over a free score
/// table by SGD with step size `lr / sqrt(1 + t / 100)` and iterate
/// averaging. Each step draws `negatives` items i.i.d. from `p_n` per
/// positive, `replicates` times.
pub fn fit_free_score_table(
    p_n: &[f64],
    negatives: usize,
    num_users: usize,
    interactions: &[(usize, usize)],
    opts: FitOptions,
) -> Result<FreeScoreFit> {
    let items = p_n.len();
    if num_users == 0 || num_users > 10 || items == 0 || items > 20 {
        return Err(Error::Precondition(format!(
            "free score tables are for small instances (<= 10 users, <= 20 items), got {num_users} x {items}"
        )));
    }
    if negatives == 0 || opts.replicates == 0 || opts.steps < 2 {
        return Err(Error::Precondition("negatives, replicates and steps must be positive".into()));
    }
    if let Some(&(u, i)) = interactions.iter().find(|&&(u, i)| u >= num_users || i >= items) {
        return Err(Error::Precondition(format!("interaction ({u}, {i}) out of range")));
    }
    if (p_n.iter().sum::<f64>() - 1.0).abs() > 1e-9 || p_n.iter().any(|p| *p < 0.0) {
        return Err(Error::Precondition("p_n must be a probability vector".into()));
    }
    let sampler = WeightedIndex::new(p_n).map_err(|e| Error::Precondition(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut scores = vec![vec![0.0; items]; num_users];
    let mut avg = vec![vec![0.0; items]; num_users];
    let burn_in = opts.steps / 2;
    let mut counts = vec![0usize; items];
    let mut grad = vec![vec![0.0; items]; num_users];
    for t in 0..opts.steps {
        grad.iter_mut().for_each(|g| g.fill(0.0));
        for _ in 0..opts.replicates {
            for &(u, i) in interactions {
                counts.fill(0);
                for _ in 0..negatives {
                    counts[sampler.sample(&mut rng)] += 1;
                }
                accumulate_grad(&scores[u], i, &counts, &mut grad[u], 1.0 / opts.replicates as f64);
            }
        }
        let lr = opts.learning_rate / (1.0 + t as f64 / 100.0).sqrt();
        for (row, g) in scores.iter_mut().zip(&grad) {
            row.iter_mut().zip(g).for_each(|(s, g)| *s -= lr * g);
        }
        if t >= burn_in {
            let w = 1.0 / (t - burn_in + 1) as f64;
            for (a, row) in avg.iter_mut().zip(&scores) {
                a.iter_mut().zip(row).for_each(|(a, s)| *a += w * (s - *a));
            }
        }
    }

    // expected gradient at the averaged table
    let probes = 4000;
    let mut expected = vec![vec![0.0; items]; num_users];
    for _ in 0..probes {
        for &(u, i) in interactions {
            counts.fill(0);
            for _ in 0..negatives {
                counts[sampler.sample(&mut rng)] += 1;
            }
            accumulate_grad(&avg[u], i, &counts, &mut expected[u], 1.0 / probes as f64);
        }
    }
    let grad_norm = expected.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if !grad_norm.is_finite() || avg.iter().flatten().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("free score table".into()));
    }
    Ok(FreeScoreFit {
        scores: avg,
        grad_norm,
        converged: grad_norm < opts.tolerance,
    })
}

/// Adds `weight * d/d f_u` of `ln(e^{f_i} + sum_j counts_j e^{f_j}) - f_i`.
fn accumulate_grad(f: &[f64], pos: usize, counts: &[usize], out: &mut [f64], weight: f64) {
    let shift = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = f.iter().map(|x| (x - shift).exp()).collect();
    let denom = e[pos] + counts.iter().zip(&e).map(|(&c, e)| c as f64 * e).sum::<f64>();
    out[pos] += weight * (e[pos] / denom - 1.0);
    for (j, &c) in counts.iter().enumerate() {
        if c > 0 {
            out[j] += weight * c as f64 * e[j] / denom;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_popularity_limit() {
        assert_eq!(closed_form_score(0.0, 100, 2, 3.5), 3.5);
    }

    #[test]
    fn two_item_difference() {
        let d = closed_form_difference(0.75, 0.25, 100, 2);
        assert!((d - (51.0f64 / 151.0).ln()).abs() < 1e-12);
        assert!((d + 1.0853).abs() < 1e-3);
    }

    #[test]
    fn strictly_decreasing_in_popularity() {
        let grid = [0.0, 0.1, 0.2, 0.4, 0.8];
        let f: Vec<f64> = grid.iter().map(|&p| closed_form_score(p, 50, 3, 0.0)).collect();
        assert!(f.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn uniform_symmetric_scores_equal() {
        let p = [0.25; 4];
        let inter: Vec<(usize, usize)> = (0..2).flat_map(|u| (0..4).map(move |i| (u, i))).collect();
        let fit = fit_free_score_table(&p, 20, 2, &inter, FitOptions { steps: 4000, ..Default::default() }).unwrap();
        let all: Vec<f64> = fit.scores.iter().flatten().copied().collect();
        let (lo, hi) = all.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        assert!(hi - lo < 0.01, "{all:?}");
    }

    #[test]
    fn rejects_large_instances() {
        let p = vec![1.0 / 21.0; 21];
        assert!(fit_free_score_table(&p, 10, 1, &[(0, 0)], FitOptions::default()).is_err());
    }

    #[test]
    fn gradient_of_single_term() {
        // f = (0, ln 2), positive 0, one draw of item 1: loss ln(1 + 2)
        let mut g = vec![0.0; 2];
        accumulate_grad(&[0.0, 2f64.ln()], 0, &[0, 1], &mut g, 1.0);
        assert!((g[0] - (1.0 / 3.0 - 1.0)).abs() < 1e-12);
        assert!((g[1] - 2.0 / 3.0).abs() < 1e-12);
    }
}
