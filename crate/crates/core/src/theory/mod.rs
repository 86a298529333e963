//! Executable checks of the analytical properties of the losses and models:
//! the popularity fixed point, the hard-negative gradient law, the DCG
//! bound, the degree dependence of propagated magnitudes, and a
//! finite-difference oracle for every analytic gradient.

pub mod dcg;
pub mod fixed_point;
pub mod gradcheck;
pub mod hard_negative;
pub mod identities;
pub mod magnitude;
pub mod pareto;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

pub use dcg::{dcg_bound_check, dcg_trials, DcgBound, DcgTrials};
pub use fixed_point::{closed_form_difference, closed_form_score, fit_free_score_table, FitOptions, FreeScoreFit};
pub use gradcheck::{finite_diff_grad, gradient_grid, relative_error, GradCheck, FD_EPSILON};
pub use hard_negative::{hardest_cosine, hardest_cosine_grid, magnitude_law, negative_grad_magnitude};
pub use identities::{loss_identities, IdentityReport};
pub use magnitude::{
    expected_sq_magnitude, linear_fit, magnitude_sweep, neighbour_cross_covariance, MagnitudeModel, MagnitudePoint,
    MAGNITUDE_DEGREES,
};
pub use pareto::{pareto_degree, pareto_moments, pareto_sample, Moments, ParetoParams};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::{batch_objective, Batch, LossConfig, LossKind, Similarity};
use crate::models::Representations;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Gradients,
    FixedPoint,
    Dcg,
    Magnitude,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Suite::All,
            "gradients" => Suite::Gradients,
            "fixed_point" | "fixed-point" => Suite::FixedPoint,
            "dcg" => Suite::Dcg,
            "magnitude" => Suite::Magnitude,
            other => {
                return Err(Error::config(
                    "suite",
                    format!("unknown suite {other:?}; expected all, gradients, fixed_point, dcg or magnitude"),
                ))
            }
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::All => "all",
            Suite::Gradients => "gradients",
            Suite::FixedPoint => "fixed_point",
            Suite::Dcg => "dcg",
            Suite::Magnitude => "magnitude",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRecord {
    pub name: String,
    /// The analytical statement the check exercises.
    pub paper_ref: String,
    pub status: CheckStatus,
    pub max_error: f64,
    pub trials: usize,
    pub detail: String,
}

impl CheckRecord {
    fn new(name: &str, reference: &str, pass: bool, max_error: f64, trials: usize, detail: String) -> Self {
        Self {
            name: name.into(),
            paper_ref: reference.into(),
            status: if pass { CheckStatus::Pass } else { CheckStatus::Fail },
            max_error,
            trials,
            detail,
        }
    }

    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Pass
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Perturbs analytic gradients so the gradient checks must fail.
    pub corrupt_gradient: bool,
    pub exec: Exec,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 20240,
            corrupt_gradient: false,
            exec: Exec::default(),
        }
    }
}

pub fn run_suite(suite: Suite, opts: &SuiteOptions) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::All | Suite::Gradients) {
        out.push(check_gradient_grid(opts)?);
        out.push(check_loss_identities(opts)?);
        out.push(check_hard_negative_law(10_000, opts)?);
        out.push(check_cosine_orthogonality(1_000, opts)?);
        out.push(check_hardest_negative());
    }
    if matches!(suite, Suite::All | Suite::FixedPoint) {
        out.extend(check_fixed_point(opts)?);
    }
    if matches!(suite, Suite::All | Suite::Dcg) {
        out.push(check_dcg(10_000, opts)?);
    }
    if matches!(suite, Suite::All | Suite::Magnitude) {
        out.push(check_pareto_moments(1_000_000, opts));
        out.extend(check_magnitude(100_000, opts)?);
    }
    Ok(out)
}

pub const GRADIENT_TOLERANCE: f64 = 1e-5;

pub fn check_gradient_grid(opts: &SuiteOptions) -> Result<CheckRecord> {
    let grid = gradient_grid(opts.seed, opts.corrupt_gradient, opts.exec)?;
    let worst = grid
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("grid is not empty");
    Ok(CheckRecord::new(
        "gradient_oracle",
        "analytic gradients vs central finite differences",
        worst.max_rel_error < GRADIENT_TOLERANCE,
        worst.max_rel_error,
        grid.len(),
        format!("worst combination {}", worst.label()),
    ))
}

pub fn check_loss_identities(opts: &SuiteOptions) -> Result<CheckRecord> {
    let r = loss_identities(1000, opts.seed, opts.exec)?;
    let worst = r.ssm_vs_bpr.max(r.ssm_vs_sm);
    Ok(CheckRecord::new(
        "loss_identities",
        "sampled softmax reduces to BPR and to full softmax",
        worst < 1e-12,
        worst,
        r.trials,
        format!("vs BPR {:.3e}, vs full softmax {:.3e}", r.ssm_vs_bpr, r.ssm_vs_sm),
    ))
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `s_j` pulled towards `s_u` by a random amount, so cosines cover (-1, 1).
fn random_pair(rng: &mut ChaCha8Rng, d: usize) -> (Vec<f64>, Vec<f64>) {
    let s_u = random_unit(rng, d);
    let noise = random_unit(rng, d);
    let w: f64 = rng.random_range(-1.0..1.0);
    let raw: Vec<f64> = s_u.iter().zip(&noise).map(|(u, e)| w * u + (1.0 - w.abs()) * e).collect();
    let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s_j = if n > 1e-6 { raw.into_iter().map(|x| x / n).collect() } else { noise };
    (s_u, s_j)
}

pub const HARD_NEGATIVE_TAUS: [f64; 4] = [0.1, 0.2, 0.5, 1.0];

/// Worst deviation of `||c(j)|| Z_u` from `sqrt(1 - x^2) e^{x / tau}`,
/// relative to `max(1, e^{x / tau})`.
pub fn check_hard_negative_law(pairs: usize, opts: &SuiteOptions) -> Result<CheckRecord> {
    let errors = opts.exec.map(pairs, |t| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(t as u64);
        let tau = HARD_NEGATIVE_TAUS[t % HARD_NEGATIVE_TAUS.len()];
        let (s_u, s_j) = random_pair(&mut rng, 8);
        let x: f64 = s_u.iter().zip(&s_j).map(|(a, b)| a * b).sum();
        let partition = (x / tau).exp() + rng.random_range(0.5..50.0);
        let c = negative_grad_magnitude(&s_u, &s_j, tau, partition)?;
        Ok((c * partition - magnitude_law(x.clamp(-1.0, 1.0), tau)).abs() / (x / tau).exp().max(1.0))
    });
    let worst = errors.into_iter().try_fold(0.0f64, |m, e| e.map(|e| m.max(e)))?;
    Ok(CheckRecord::new(
        "hard_negative_law",
        "per-negative gradient magnitude sqrt(1 - x^2) exp(x / tau) / Z_u",
        worst < 1e-10,
        worst,
        pairs,
        format!("tau in {HARD_NEGATIVE_TAUS:?}"),
    ))
}

/// `|<dl/dz, z>| / (||dl/dz|| ||z||)` over every row of random cosine
/// sampled softmax problems; must stay below 1e-8.
pub fn check_cosine_orthogonality(trials: usize, opts: &SuiteOptions) -> Result<CheckRecord> {
    let worst = opts.exec.map(trials, |t| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
        rng.set_stream(t as u64);
        let (m, n, d) = (3, 6, 8);
        let scale: f64 = rng.random_range(0.1..10.0);
        let flat: Vec<f64> = (0..(m + n) * d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let reps = Representations::from_flat(m, n, d, &flat)?;
        let positives: Vec<(usize, usize)> = (0..4).map(|_| (rng.random_range(0..m), rng.random_range(0..n))).collect();
        let negatives = positives
            .iter()
            .map(|&(_, i)| (0..3).map(|k| (i + 1 + k) % n).collect())
            .collect();
        let tau = HARD_NEGATIVE_TAUS[t % HARD_NEGATIVE_TAUS.len()];
        let cfg = LossConfig::new(LossKind::Ssm, Similarity::Cosine).with_temperature(tau);
        let (_, g) = batch_objective(&cfg, &Batch { positives, negatives }, &reps, Exec::Sequential)?;
        let mut worst = 0.0f64;
        for (z, gz) in [(&reps.users, &g.users), (&reps.items, &g.items)] {
            for r in 0..z.rows() {
                let (zr, gr) = (z.row(r), gz.row(r));
                let gn = gr.iter().map(|x| x * x).sum::<f64>().sqrt();
                let zn = zr.iter().map(|x| x * x).sum::<f64>().sqrt();
                if gn > 0.0 {
                    let inner: f64 = zr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    worst = worst.max(inner.abs() / (gn * zn));
                }
            }
        }
        Ok(worst)
    });
    let worst = worst.into_iter().try_fold(0.0f64, |m, e| e.map(|e| m.max(e)))?;
    Ok(CheckRecord::new(
        "cosine_gradient_orthogonality",
        "cosine gradients are orthogonal to the representation",
        worst < 1e-8,
        worst,
        trials,
        String::new(),
    ))
}

pub fn check_hardest_negative() -> CheckRecord {
    let taus = [0.1, 0.15, 0.2, 0.25, 0.3];
    let mut worst = 0.0f64;
    let mut interior = true;
    for tau in taus {
        let grid = hardest_cosine_grid(tau, 200_001);
        interior &= grid > 0.0 && grid < 1.0;
        worst = worst.max((grid - hardest_cosine(tau)).abs());
    }
    CheckRecord::new(
        "hardest_negative_interior",
        "hard negatives (0 < x < 1) receive the largest gradient",
        interior && worst < 1e-4,
        worst,
        taus.len(),
        format!("maximizer at tau 0.2: {:.4}", hardest_cosine(0.2)),
    )
}

/// Popularity grid for the monotonicity check.
pub const POPULARITY_GRID: [f64; 5] = [0.05, 0.1, 0.2, 0.25, 0.4];

pub fn check_fixed_point(opts: &SuiteOptions) -> Result<Vec<CheckRecord>> {
    let fit = |p: &[f64], negatives: usize, positives: &[(usize, usize)], seed: u64| {
        fit_free_score_table(p, negatives, 1, positives, FitOptions { seed, ..FitOptions::default() })
    };
    let two = [(0, 0), (0, 1)];
    let target = closed_form_difference(0.75, 0.25, 100, 2);
    let base = fit(&[0.75, 0.25], 100, &two, opts.seed)?;
    let err = (base.difference(0, 0, 1) - target).abs();
    let doubled = fit(&[0.75, 0.25], 200, &two, opts.seed + 1)?;
    let shift = (doubled.difference(0, 0, 1) - base.difference(0, 0, 1)).abs();

    let all: Vec<(usize, usize)> = (0..POPULARITY_GRID.len()).map(|i| (0, i)).collect();
    let grid = fit(&POPULARITY_GRID, 100, &all, opts.seed + 2)?;
    let monotone = grid.scores[0].windows(2).all(|w| w[1] < w[0]);
    let worst_grid = (1..POPULARITY_GRID.len())
        .map(|i| {
            let want = closed_form_difference(POPULARITY_GRID[i], POPULARITY_GRID[0], 100, POPULARITY_GRID.len());
            (grid.difference(0, i, 0) - want).abs()
        })
        .fold(0.0, f64::max);

    Ok(vec![
        CheckRecord::new(
            "fixed_point_difference",
            "optimal score falls with log(1 + N |P_u| p_n)",
            base.converged && err < 0.02,
            err,
            1,
            format!("fitted {:.4}, closed form {:.4}, grad norm {:.2e}", base.difference(0, 0, 1), target, base.grad_norm),
        ),
        CheckRecord::new(
            "fixed_point_monotone",
            "optimal score strictly decreasing in sampling probability",
            grid.converged && monotone,
            worst_grid,
            POPULARITY_GRID.len(),
            format!("scores {:?}", grid.scores[0].iter().map(|s| (s * 1e4).round() / 1e4).collect::<Vec<_>>()),
        ),
        CheckRecord::new(
            "fixed_point_negatives_scaling",
            "doubling N shifts scores but keeps differences",
            doubled.converged && shift < 0.02,
            shift,
            1,
            format!("N=200 difference {:.4}", doubled.difference(0, 0, 1)),
        ),
    ])
}

pub fn check_dcg(trials: usize, opts: &SuiteOptions) -> Result<CheckRecord> {
    let t = dcg_trials(trials, opts.seed, opts.exec)?;
    Ok(CheckRecord::new(
        "dcg_bound",
        "-log DCG <= log rank <= softmax loss",
        t.violations == 0,
        (-t.min_margin).max(0.0),
        t.trials,
        format!("{} violations", t.violations),
    ))
}

pub fn check_pareto_moments(draws: usize, opts: &SuiteOptions) -> CheckRecord {
    let p = ParetoParams::new(3.0).expect("valid tail index");
    let m = pareto_moments(&p, draws, opts.seed, opts.exec);
    let (mean, var) = (p.mean().expect("alpha > 1"), p.variance().expect("alpha > 2"));
    let mean_ok = (m.mean - mean).abs() <= 3.0 * m.std_error();
    let var_err = (m.variance() - var).abs() / var;
    CheckRecord::new(
        "pareto_moments",
        "Pareto mean alpha/(alpha-1) and variance alpha/((alpha-1)^2 (alpha-2))",
        mean_ok && var_err <= 0.05,
        var_err,
        draws,
        format!("mean {:.5} (se {:.2e}), variance {:.5}", m.mean, m.std_error(), m.variance()),
    )
}

/// Parameter sets for the magnitude Monte Carlo:
/// zero-mean symmetric, non-zero-mean symmetric, and a target-only exponent.
pub fn magnitude_models() -> Result<[MagnitudeModel; 3]> {
    Ok([
        MagnitudeModel::new(0.5, 0.5, 0.0, 1.0, 3.0)?,
        MagnitudeModel::new(0.5, 0.5, 0.5, 1.0, 3.0)?,
        MagnitudeModel::new(1.0, 0.0, 0.3, 0.5, 3.0)?,
    ])
}

pub fn check_magnitude(trials: usize, opts: &SuiteOptions) -> Result<Vec<CheckRecord>> {
    let alpha = 3.0;
    let models = magnitude_models()?;
    let mut worst = 0.0f64;
    let mut all_agree = true;
    let mut points = 0;
    let mut linear = None;
    for (k, model) in models.iter().enumerate() {
        let pts = magnitude_sweep(model, alpha, &MAGNITUDE_DEGREES, trials, opts.seed + 100 * k as u64, opts.exec)?;
        for p in &pts {
            worst = worst.max(p.relative_error());
            all_agree &= p.agrees();
        }
        points += pts.len();
        if k == 1 {
            let xs: Vec<f64> = pts.iter().map(|p| p.degree as f64).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.empirical.mean).collect();
            linear = Some(linear_fit(&xs, &ys));
        }
    }
    let fit = linear.expect("second model fitted");
    let cov = neighbour_cross_covariance(&models[1], alpha, trials, opts.seed + 7, opts.exec)?;
    Ok(vec![
        CheckRecord::new(
            "magnitude_formula",
            "E[q^2] = a D^(1 - 2 alpha0) + b D^(2 - 2 alpha0)",
            all_agree,
            worst,
            points * trials,
            format!("{} degree points, 2% or 3 standard errors", points),
        ),
        CheckRecord::new(
            "magnitude_linear_growth",
            "symmetric normalization with non-zero mean grows linearly in degree",
            fit.r_squared > 0.99,
            1.0 - fit.r_squared,
            MAGNITUDE_DEGREES.len(),
            format!("slope {:.4}, intercept {:.4}, R^2 {:.5}", fit.slope, fit.intercept, fit.r_squared),
        ),
        CheckRecord::new(
            "neighbour_independence",
            "distinct neighbour contributions are uncorrelated",
            cov.covariance.abs() <= 3.0 * cov.std_error,
            cov.covariance.abs(),
            trials,
            format!("covariance {:.3e}, se {:.3e}", cov.covariance, cov.std_error),
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in [Suite::All, Suite::Gradients, Suite::FixedPoint, Suite::Dcg, Suite::Magnitude] {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn dcg_suite_passes() {
        let r = run_suite(Suite::Dcg, &SuiteOptions::default()).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r[0].passed() && r[0].trials == 10_000);
    }

    #[test]
    fn corrupted_gradients_fail() {
        let opts = SuiteOptions {
            corrupt_gradient: true,
            ..SuiteOptions::default()
        };
        assert!(!check_gradient_grid(&opts).unwrap().passed());
    }
}
