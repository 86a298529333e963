//! The chain `-ln DCG <= ln rank <= softmax loss` for a single positive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Rounding slack allowed on each inequality.
const SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcgBound {
    /// 1 + number of candidates scoring strictly above the positive.
    pub rank: usize,
    /// `-ln DCG`, with `DCG = 1 / log2(1 + rank)`.
    pub neg_log_dcg: f64,
    /// `ln rank`.
    pub log_rank: f64,
    /// `-ln softmax(scores)[positive]`.
    pub softmax_loss: f64,
    pub ok: bool,
}

impl DcgBound {
    /// How far the tighter of the two inequalities is from failing
    /// (negative means violated).
    pub fn margin(&self) -> f64 {
        (self.log_rank - self.neg_log_dcg).min(self.softmax_loss - self.log_rank)
    }
}

pub fn dcg_bound_check(scores: &[f64], positive: usize) -> Result<DcgBound> {
    if positive >= scores.len() {
        return Err(Error::Precondition(format!("positive {positive} not in a set of {}", scores.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("candidate scores".into()));
    }
    let fi = scores[positive];
    let rank = 1 + scores.iter().filter(|&&s| s > fi).count();
    let neg_log_dcg = ((1 + rank) as f64).log2().ln();
    let log_rank = (rank as f64).ln();
    let shift = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = shift + scores.iter().map(|s| (s - shift).exp()).sum::<f64>().ln();
    let softmax_loss = log_z - fi;
    let ok = neg_log_dcg <= log_rank + SLACK && log_rank <= softmax_loss + SLACK;
    Ok(DcgBound {
        rank,
        neg_log_dcg,
        log_rank,
        softmax_loss,
        ok,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcgTrials {
    pub trials: usize,
    pub violations: usize,
    /// Smallest margin seen.
    pub min_margin: f64,
}

/// Random candidate sets of size 2..=50 with uniform scores at several
/// spreads, some rounded to force ties, and one positive each.
pub fn dcg_trials(trials: usize, seed: u64, exec: Exec) -> Result<DcgTrials> {
    let results = exec.map(trials, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let n = rng.random_range(2..=50);
        let spread = [0.1, 1.0, 5.0, 20.0][rng.random_range(0..4)];
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s = spread * (rng.random::<f64>() - 0.5);
                // occasional exact ties with a coarse grid
                if rng.random::<f64>() < 0.2 {
                    s.round()
                } else {
                    s
                }
            })
            .collect();
        dcg_bound_check(&scores, rng.random_range(0..n))
    });
    let mut out = DcgTrials {
        trials,
        violations: 0,
        min_margin: f64::INFINITY,
    };
    for r in results {
        let r = r?;
        out.violations += usize::from(!r.ok);
        out.min_margin = out.min_margin.min(r.margin());
    }
    Ok(out)
}
