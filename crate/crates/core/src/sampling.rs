//! Negative samplers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Uniform,
    InBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_strategy")]
    pub strategy: SamplingStrategy,
    /// Uniform negatives per positive (SSM/CCL with `uniform`).
    #[serde(default = "default_negatives")]
    pub negatives_per_positive: usize,
    /// Negatives per positive for BCE (a 1:4 positive:negative ratio).
    #[serde(default = "default_bce_ratio")]
    pub bce_ratio: usize,
    /// Offset mixed into the trainer seed for the sampling stream.
    #[serde(default)]
    pub seed: u64,
}

fn default_strategy() -> SamplingStrategy {
    SamplingStrategy::InBatch
}

fn default_negatives() -> usize {
    64
}

fn default_bce_ratio() -> usize {
    4
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: default_strategy(),
            negatives_per_positive: default_negatives(),
            bce_ratio: default_bce_ratio(),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives_per_positive == 0 {
            return Err(Error::config("sampler.negatives_per_positive", "must be >= 1"));
        }
        if self.bce_ratio == 0 {
            return Err(Error::config("sampler.bce_ratio", "must be >= 1"));
        }
        Ok(())
    }
}

/// `n` items drawn uniformly, with replacement, from the items user `u`
/// has not interacted with in `train`.
pub fn sample_uniform<R: Rng + ?Sized>(
    u: usize,
    n: usize,
    train: &InteractionDataset,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let seen = train.items_of(u);
    let catalog = train.num_items();
    if seen.len() >= catalog {
        return Err(Error::Precondition(format!(
            "user {u} has interacted with all {catalog} items; no negatives to sample"
        )));
    }
    if seen.len() * 2 <= catalog {
        // rejection sampling: acceptance probability is at least 1/2
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let j = rng.random_range(0..catalog);
            if seen.binary_search(&j).is_err() {
                out.push(j);
            }
        }
        Ok(out)
    } else {
        let complement = complement_of(seen, catalog);
        Ok((0..n)
            .map(|_| complement[rng.random_range(0..complement.len())])
            .collect())
    }
}

fn complement_of(sorted: &[usize], catalog: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(catalog - sorted.len());
    let mut it = sorted.iter().peekable();
    for j in 0..catalog {
        if it.peek() == Some(&&j) {
            it.next();
        } else {
            out.push(j);
        }
    }
    out
}

/// Negatives shared within a mini-batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InBatchNegatives {
    pub negatives: Vec<Vec<usize>>,
    /// Anchors whose candidate list came out empty (every other positive in
    /// the batch was the same item). They contribute nothing to the loss.
    pub empty: Vec<bool>,
}

impl InBatchNegatives {
    pub fn empty_count(&self) -> usize {
        self.empty.iter().filter(|&&e| e).count()
    }
}

/// For each anchor `(u, i)`, the items of every other positive in the
/// batch, as a multiset, minus copies of `i` itself. Other items of `u`
/// are kept.
pub fn in_batch_negatives(positives: &[(usize, usize)]) -> Result<InBatchNegatives> {
    if positives.len() < 2 {
        return Err(Error::Precondition(format!(
            "in-batch sampling needs at least 2 positives, got {}",
            positives.len()
        )));
    }
    let negatives: Vec<Vec<usize>> = positives
        .iter()
        .enumerate()
        .map(|(a, &(_, i))| {
            positives
                .iter()
                .enumerate()
                .filter(|&(b, &(_, j))| b != a && j != i)
                .map(|(_, &(_, j))| j)
                .collect()
        })
        .collect();
    let empty = negatives.iter().map(Vec::is_empty).collect();
    Ok(InBatchNegatives { negatives, empty })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ds(m: usize, n: usize, pairs: &[(usize, usize)]) -> InteractionDataset {
        InteractionDataset::from_pairs(m, n, pairs.iter().copied()).unwrap().0
    }

    #[test]
    fn single_admissible_item() {
        let d = ds(1, 2, &[(0, 0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_uniform(0, 50, &d, &mut rng).unwrap(), vec![1; 50]);
    }

    #[test]
    fn saturated_user_is_an_error() {
        let d = ds(1, 2, &[(0, 0), (0, 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_uniform(0, 1, &d, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_draws() {
        let d = ds(2, 30, &[(0, 3), (0, 7), (1, 1)]);
        let a = sample_uniform(0, 100, &d, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_uniform(0, 100, &d, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dense_user_uses_complement() {
        let pairs: Vec<_> = (0..9).map(|i| (0, i)).collect();
        let d = ds(1, 12, &pairs);
        let draws = sample_uniform(0, 300, &d, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(draws.iter().all(|&j| (9..12).contains(&j)));
        for j in 9..12 {
            assert!(draws.contains(&j));
        }
    }

    #[test]
    fn uniform_frequencies_within_multinomial_bounds() {
        // 10 items, user owns 2 of them: 8 admissible, p = 1/8 each.
        let d = ds(1, 10, &[(0, 2), (0, 5)]);
        let n = 100_000;
        let draws = sample_uniform(0, n, &d, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let mut counts = [0usize; 10];
        draws.iter().for_each(|&j| counts[j] += 1);
        assert_eq!(counts[2] + counts[5], 0);
        let p = 1.0 / 8.0;
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for (j, &c) in counts.iter().enumerate() {
            if j != 2 && j != 5 {
                assert!((c as f64 - mean).abs() < 3.0 * sd, "item {j}: {c}");
            }
        }
    }

    #[test]
    fn in_batch_definition() {
        let out = in_batch_negatives(&[(0, 10), (1, 11), (2, 12)]).unwrap();
        assert_eq!(out.negatives[0], vec![11, 12]);
        assert_eq!(out.negatives[2], vec![10, 11]);
        assert_eq!(out.empty_count(), 0);
    }

    #[test]
    fn in_batch_collision_flags_anchor() {
        let out = in_batch_negatives(&[(0, 10), (1, 10)]).unwrap();
        assert!(out.negatives[0].is_empty());
        assert_eq!(out.empty, vec![true, true]);
    }

    #[test]
    fn in_batch_multiset_semantics() {
        let out = in_batch_negatives(&[(0, 1), (1, 2), (2, 2), (0, 3)]).unwrap();
        assert_eq!(out.negatives[0], vec![2, 2, 3]);
        // anchor 3 belongs to user 0, who also owns item 1: kept
        assert_eq!(out.negatives[3], vec![1, 2, 2]);
        assert_eq!(out.negatives[1], vec![1, 3]);
    }

    #[test]
    fn in_batch_needs_two() {
        assert!(in_batch_negatives(&[(0, 0)]).is_err());
    }
}
