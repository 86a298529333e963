//! Sampled softmax special cases: one inner-product negative gives BPR,
//! the full catalog as negatives gives the full softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::exec::Exec;
use crate::losses::{batch_objective, Batch, LossConfig, LossKind, Similarity};
use crate::models::Representations;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest loss or gradient discrepancy between two objectives on one batch.
fn discrepancy(a: &LossConfig, b: &LossConfig, batch: &Batch, reps: &Representations) -> Result<f64> {
    let (la, ga) = batch_objective(a, batch, reps, Exec::Sequential)?;
    let (lb, gb) = batch_objective(b, batch, reps, Exec::Sequential)?;
    Ok((la - lb).abs().max(max_abs_diff(&ga.to_flat(), &gb.to_flat())))
}

fn random_reps(rng: &mut ChaCha8Rng, m: usize, n: usize, d: usize) -> Result<Representations> {
    let scale = [0.1, 1.0, 3.0][rng.random_range(0..3)];
    let flat: Vec<f64> = (0..(m + n) * d).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect();
    Representations::from_flat(m, n, d, &flat)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityReport {
    pub trials: usize,
    pub ssm_vs_bpr: f64,
    pub ssm_vs_sm: f64,
}

/// `trials` random instances of each identity; reports the largest absolute
/// difference in loss or representation gradient.
pub fn loss_identities(trials: usize, seed: u64, exec: Exec) -> Result<IdentityReport> {
    let per_trial = exec.map(trials, |t| -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let m = rng.random_range(1..6);
        let n = rng.random_range(2..9);
        let d = rng.random_range(1..6);
        let reps = random_reps(&mut rng, m, n, d)?;
        let b = rng.random_range(1..8);
        let positives: Vec<(usize, usize)> = (0..b).map(|_| (rng.random_range(0..m), rng.random_range(0..n))).collect();

        let one_negative = Batch {
            negatives: positives
                .iter()
                .map(|&(_, i)| vec![(i + rng.random_range(1..n)) % n])
                .collect(),
            positives: positives.clone(),
        };
        let ssm_ip = LossConfig::new(LossKind::Ssm, Similarity::InnerProduct);
        let bpr = LossConfig::new(LossKind::Bpr, Similarity::InnerProduct);
        let e1 = discrepancy(&ssm_ip, &bpr, &one_negative, &reps)?;

        let catalog = Batch {
            negatives: positives.iter().map(|&(_, i)| (0..n).filter(|&j| j != i).collect()).collect(),
            positives,
        };
        let sim = if rng.random::<bool>() {
            Similarity::Cosine
        } else {
            Similarity::InnerProduct
        };
        let tau = [0.1, 0.2, 0.5, 1.0][rng.random_range(0..4)];
        let ssm = LossConfig::new(LossKind::Ssm, sim).with_temperature(tau);
        let sm = LossConfig::new(LossKind::Sm, sim).with_temperature(tau);
        let e2 = discrepancy(&ssm, &sm, &catalog, &reps)?;
        Ok((e1, e2))
    });
    let mut report = IdentityReport {
        trials,
        ssm_vs_bpr: 0.0,
        ssm_vs_sm: 0.0,
    };
    for r in per_trial {
        let (a, b) = r?;
        report.ssm_vs_bpr = report.ssm_vs_bpr.max(a);
        report.ssm_vs_sm = report.ssm_vs_sm.max(b);
    }
    Ok(report)
}
