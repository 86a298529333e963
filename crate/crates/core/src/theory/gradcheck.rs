//! Central finite differences and the loss x model x similarity gradient grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::{batch_objective, Batch, LossConfig, LossKind, Similarity};
use crate::models::{backward, forward, EmbeddingTable, ModelKind, RecommenderConfig};
use crate::sampling::{in_batch_negatives, sample_uniform};

pub const FD_EPSILON: f64 = 1e-6;

/// Central-difference gradient of `f` at `params`, one coordinate per task.
pub fn finite_diff_grad<F>(f: F, params: &[f64], epsilon: f64, exec: Exec) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::Precondition(format!("epsilon {epsilon} outside [1e-7, 1e-4]")));
    }
    exec.map(params.len(), |k| {
        let mut x = params.to_vec();
        x[k] = params[k] + epsilon;
        let up = f(&x)?;
        x[k] = params[k] - epsilon;
        let down = f(&x)?;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!("objective at coordinate {k}")));
        }
        Ok((up - down) / (2.0 * epsilon))
    })
    .into_iter()
    .collect()
}

/// Largest coordinate error relative to the gradient's own scale:
/// `max_k |a_k - n_k| / max(max_k |a_k|, max_k |n_k|, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// A tiny seeded problem: graph, tables and a batch with the negatives the
/// loss would see in training.
#[derive(Clone, Debug)]
pub struct GradInstance {
    pub graph: InteractionDataset,
    pub tables: EmbeddingTable,
    pub batch: Batch,
}

/// Random bipartite graph where every user and every item has at least one
/// edge, uniform(-1, 1) tables and a batch covering all edges.
pub fn grad_instance(loss: LossKind, users: usize, items: usize, dim: usize, seed: u64) -> Result<GradInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adj = vec![vec![false; items]; users];
    for k in 0..users.max(items) {
        adj[k % users][k % items] = true;
    }
    for row in adj.iter_mut() {
        for cell in row.iter_mut() {
            *cell |= rng.random::<f64>() < 0.3;
        }
    }
    // every item must keep an edge, every user a non-edge for uniform sampling
    for u in 0..users {
        if adj[u].iter().all(|&e| e) {
            let drop = (0..items).find(|&i| i != u % items && (0..users).any(|v| v != u && adj[v][i]));
            adj[u][drop.ok_or_else(|| Error::Precondition("instance too small".into()))?] = false;
        }
    }
    let pairs = (0..users).flat_map(|u| (0..items).filter(|&i| adj[u][i]).map(move |i| (u, i)).collect::<Vec<_>>());
    let graph = InteractionDataset::from_pairs(users, items, pairs.collect::<Vec<_>>())?.0;
    let flat: Vec<f64> = (0..(users + items) * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tables = EmbeddingTable::from_flat(users, items, dim, &flat)?;
    let positives: Vec<(usize, usize)> = graph.pairs().collect();
    let batch = match loss {
        LossKind::Sm => Batch {
            positives,
            negatives: Vec::new(),
        },
        LossKind::Ssm => {
            let shared = in_batch_negatives(&positives)?;
            let (positives, negatives) = positives
                .into_iter()
                .zip(shared.negatives)
                .filter(|(_, n)| !n.is_empty())
                .unzip();
            Batch { positives, negatives }
        }
        LossKind::Bpr | LossKind::Bce | LossKind::Ccl => {
            let n = match loss {
                LossKind::Bpr => 1,
                LossKind::Bce => 4,
                _ => 3,
            };
            let negatives = positives
                .iter()
                .map(|&(u, _)| sample_uniform(u, n, &graph, &mut rng))
                .collect::<Result<_>>()?;
            Batch { positives, negatives }
        }
    };
    Ok(GradInstance { graph, tables, batch })
}

/// Loss as a function of the flattened layer-0 tables.
pub fn objective_at(model: &RecommenderConfig, loss: &LossConfig, inst: &GradInstance, flat: &[f64]) -> Result<f64> {
    let tables = EmbeddingTable::from_flat(inst.graph.num_users(), inst.graph.num_items(), inst.tables.dim(), flat)?;
    let reps = forward(model, &tables, &inst.graph, Exec::Sequential)?;
    Ok(batch_objective(loss, &inst.batch, &reps, Exec::Sequential)?.0)
}

/// Analytic gradient through the model's backward pass, flattened.
pub fn analytic_grad(model: &RecommenderConfig, loss: &LossConfig, inst: &GradInstance, exec: Exec) -> Result<Vec<f64>> {
    let reps = forward(model, &inst.tables, &inst.graph, exec)?;
    let (_, grad_reps) = batch_objective(loss, &inst.batch, &reps, exec)?;
    Ok(backward(model, &inst.graph, &grad_reps, exec)?.to_flat())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub loss: LossKind,
    pub model: ModelKind,
    pub similarity: Similarity,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn label(&self) -> String {
        format!("{}/{:?}/{}", self.loss.name(), self.model, self.similarity.short_name())
    }
}

/// The four model variants of the grid.
pub fn grid_models() -> [RecommenderConfig; 4] {
    [
        RecommenderConfig::mf(),
        RecommenderConfig::svdpp_user(0.5, 0.0),
        RecommenderConfig::svdpp_item(0.5, 0.0),
        RecommenderConfig::lightgcn(2),
    ]
}

/// Compares analytic and finite-difference gradients for one combination.
/// `corrupt` perturbs the analytic side, as a failure fixture.
pub fn check_gradient(
    loss: LossKind,
    model: &RecommenderConfig,
    similarity: Similarity,
    seed: u64,
    corrupt: bool,
    exec: Exec,
) -> Result<GradCheck> {
    let inst = grad_instance(loss, 5, 7, 8, seed)?;
    let cfg = LossConfig::new(loss, similarity);
    let mut analytic = analytic_grad(model, &cfg, &inst, exec)?;
    if corrupt {
        analytic[0] += 1e-3 * (1.0 + analytic[0].abs());
    }
    let numeric = finite_diff_grad(|x| objective_at(model, &cfg, &inst, x), &inst.tables.to_flat(), FD_EPSILON, exec)?;
    Ok(GradCheck {
        loss,
        model: model.kind,
        similarity,
        max_rel_error: relative_error(&analytic, &numeric),
    })
}

/// Every loss x model x similarity combination.
pub fn gradient_grid(seed: u64, corrupt: bool, exec: Exec) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for (l, loss) in LossKind::ALL.into_iter().enumerate() {
        for (m, model) in grid_models().iter().enumerate() {
            for sim in [Similarity::InnerProduct, Similarity::Cosine] {
                let s = seed.wrapping_add((l * 8 + m * 2) as u64);
                out.push(check_gradient(loss, model, sim, s, corrupt, exec)?);
            }
        }
    }
    Ok(out)
}
