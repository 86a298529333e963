//! Seeded clustered interaction data with Pareto-skewed degrees.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pareto::{pareto_sample, ParetoParams};
use crate::data::InteractionDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    /// Tail index of user degrees (scaled by `min_degree`).
    pub user_alpha: f64,
    /// Tail index of item popularity weights.
    pub item_alpha: f64,
    pub min_degree: usize,
    pub max_degree: usize,
    /// Probability that an interaction stays inside the user's cluster.
    pub in_cluster: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 500,
            items: 300,
            clusters: 10,
            user_alpha: 2.5,
            item_alpha: 1.5,
            min_degree: 10,
            max_degree: 80,
            in_cluster: 0.8,
            seed: 0,
        }
    }
}

/// Users and items are assigned to clusters round-robin. Each user draws a
/// Pareto degree, then that many distinct items: from its own cluster with
/// probability `in_cluster`, otherwise from the whole catalog, always in
/// proportion to Pareto item weights.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<InteractionDataset> {
    if cfg.clusters == 0 || cfg.items < cfg.clusters || cfg.users == 0 {
        return Err(Error::Precondition("need users, and at least one item per cluster".into()));
    }
    if cfg.min_degree == 0 || cfg.max_degree < cfg.min_degree || cfg.max_degree > cfg.items / 2 {
        return Err(Error::Precondition("degree bounds must satisfy 1 <= min <= max <= items / 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let item_tail = ParetoParams::new(cfg.item_alpha)?;
    let user_tail = ParetoParams::new(cfg.user_alpha)?;
    let weights: Vec<f64> = (0..cfg.items).map(|_| pareto_sample(&item_tail, &mut rng)).collect();
    let global = WeightedIndex::new(&weights).map_err(|e| Error::Precondition(e.to_string()))?;
    let members: Vec<Vec<usize>> = (0..cfg.clusters)
        .map(|c| (c..cfg.items).step_by(cfg.clusters).collect())
        .collect();
    let local: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| WeightedIndex::new(m.iter().map(|&i| weights[i])).expect("positive weights"))
        .collect();

    let mut pairs = Vec::new();
    let mut taken = vec![false; cfg.items];
    for u in 0..cfg.users {
        let c = u % cfg.clusters;
        let degree = ((cfg.min_degree as f64 * pareto_sample(&user_tail, &mut rng)).floor() as usize)
            .clamp(cfg.min_degree, cfg.max_degree);
        taken.fill(false);
        let mut got = 0;
        while got < degree {
            let i = if rng.random::<f64>() < cfg.in_cluster {
                members[c][local[c].sample(&mut rng)]
            } else {
                global.sample(&mut rng)
            };
            if !taken[i] {
                taken[i] = true;
                pairs.push((u, i));
                got += 1;
            }
        }
    }
    Ok(InteractionDataset::from_pairs(cfg.users, cfg.items, pairs)?.0)
}
