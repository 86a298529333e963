//! Training objectives and their gradients.
//!
//! Losses are first evaluated on score rows (one positive plus its
//! candidates), giving `dL/df` per slot. [`batch_objective`] then chains
//! those through the similarity function to the user and item
//! representations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::models::{Embeddings, Matrix, Representations};

/// Below this norm a vector is treated as having no direction.
pub const NORM_EPSILON: f64 = 1e-12;

pub const DEFAULT_TEMPERATURE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "BCE", alias = "bce")]
    Bce,
    #[serde(rename = "BPR", alias = "bpr")]
    Bpr,
    #[serde(rename = "SM", alias = "sm")]
    Sm,
    #[serde(rename = "CCL", alias = "ccl")]
    Ccl,
    #[serde(rename = "SSM", alias = "ssm")]
    Ssm,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [LossKind::Bce, LossKind::Bpr, LossKind::Sm, LossKind::Ccl, LossKind::Ssm];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Bce => "BCE",
            LossKind::Bpr => "BPR",
            LossKind::Sm => "SM",
            LossKind::Ccl => "CCL",
            LossKind::Ssm => "SSM",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Similarity {
    #[serde(rename = "inner_product", alias = "ip", alias = "IP")]
    InnerProduct,
    #[serde(rename = "cosine", alias = "cos", alias = "COS")]
    Cosine,
}

impl Similarity {
    pub fn short_name(self) -> &'static str {
        match self {
            Similarity::InnerProduct => "IP",
            Similarity::Cosine => "COS",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default = "default_similarity")]
    pub similarity: Similarity,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_margin")]
    pub ccl_margin: f64,
    #[serde(default = "default_weight")]
    pub ccl_weight: f64,
    #[serde(default)]
    pub l2_coeff: f64,
}

fn default_similarity() -> Similarity {
    Similarity::Cosine
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_margin() -> f64 {
    0.5
}

fn default_weight() -> f64 {
    1.0
}

impl LossConfig {
    pub fn new(kind: LossKind, similarity: Similarity) -> Self {
        Self {
            kind,
            similarity,
            temperature: DEFAULT_TEMPERATURE,
            ccl_margin: default_margin(),
            ccl_weight: default_weight(),
            l2_coeff: 0.0,
        }
    }

    pub fn with_temperature(mut self, tau: f64) -> Self {
        self.temperature = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config("loss.temperature", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.ccl_margin) {
            return Err(Error::config("loss.ccl_margin", "must lie in [0, 1]"));
        }
        if !(self.ccl_weight.is_finite() && self.ccl_weight >= 0.0) {
            return Err(Error::config("loss.ccl_weight", "must be >= 0"));
        }
        if !(self.l2_coeff.is_finite() && self.l2_coeff >= 0.0) {
            return Err(Error::config("loss.l2_coeff", "must be >= 0"));
        }
        Ok(())
    }

    /// Multiplier applied to the raw similarity. Cosine scores are divided
    /// by the temperature, except for CCL whose margin lives on raw cosine.
    pub fn score_scale(&self) -> f64 {
        match (self.similarity, self.kind) {
            (Similarity::Cosine, LossKind::Ccl) => 1.0,
            (Similarity::Cosine, _) => 1.0 / self.temperature,
            (Similarity::InnerProduct, _) => 1.0,
        }
    }
}

/// Affinity score f(u, i). Inner product is unscaled; cosine is divided by
/// `tau`. A zero-norm vector has cosine 0 with everything.
pub fn similarity(zu: &[f64], zi: &[f64], sim: Similarity, tau: f64) -> Result<f64> {
    if zu.len() != zi.len() {
        return Err(Error::DimensionMismatch {
            expected: zu.len(),
            actual: zi.len(),
        });
    }
    if zu.iter().chain(zi).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("similarity input".into()));
    }
    let d = dot(zu, zi);
    Ok(match sim {
        Similarity::InnerProduct => d,
        Similarity::Cosine => {
            let (nu, ni) = (norm(zu), norm(zi));
            if nu < NORM_EPSILON || ni < NORM_EPSILON {
                0.0
            } else {
                d / (nu * ni * tau)
            }
        }
    })
}

/// Scores of one positive against its candidate negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub positive: f64,
    pub negatives: Vec<f64>,
}

/// `dL/df` for each slot of a [`ScoreRow`].
#[derive(Clone, Debug, PartialEq)]
pub struct RowGrad {
    pub positive: f64,
    pub negatives: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<RowGrad>,
}

/// Scores of one positive against the whole catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct CatalogRow {
    pub positive: usize,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatalogLossOutput {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn ensure_rows(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Precondition("loss over an empty batch".into()));
    }
    Ok(())
}

/// Softmax over `{positive} ∪ negatives` with the positive at index 0,
/// max-shifted. Returns the probabilities and log of the partition sum.
pub fn softmax_probabilities(row: &ScoreRow) -> (Vec<f64>, f64) {
    let max = row.negatives.iter().copied().fold(row.positive, f64::max);
    let mut probs: Vec<f64> = std::iter::once(row.positive)
        .chain(row.negatives.iter().copied())
        .map(|f| (f - max).exp())
        .collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    (probs, max + z.ln())
}

/// Sampled softmax: mean over rows of `-log softmax(positive)` with the
/// denominator restricted to the positive and its sampled negatives.
pub fn ssm_loss(rows: &[ScoreRow]) -> Result<LossOutput> {
    ensure_rows(rows.len())?;
    let scale = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        if row.negatives.is_empty() {
            return Err(Error::Precondition(format!("row {r} has no negatives")));
        }
        let (probs, log_z) = softmax_probabilities(row);
        loss += log_z - row.positive;
        grads.push(RowGrad {
            positive: (probs[0] - 1.0) * scale,
            negatives: probs[1..].iter().map(|p| p * scale).collect(),
        });
    }
    Ok(LossOutput {
        loss: loss * scale,
        grads,
    })
}

/// Pairwise BPR: mean of `-log sigma(f_pos - f_neg)`, one negative per row.
pub fn bpr_loss(rows: &[ScoreRow]) -> Result<LossOutput> {
    ensure_rows(rows.len())?;
    let scale = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        if row.negatives.len() != 1 {
            return Err(Error::Precondition(format!(
                "BPR needs exactly one negative, row {r} has {}",
                row.negatives.len()
            )));
        }
        let diff = row.positive - row.negatives[0];
        loss += softplus(-diff);
        let s = sigmoid(-diff) * scale;
        grads.push(RowGrad {
            positive: -s,
            negatives: vec![s],
        });
    }
    Ok(LossOutput {
        loss: loss * scale,
        grads,
    })
}

/// Pointwise binary cross-entropy, normalized by the total number of
/// scored samples (positives plus negatives).
pub fn bce_loss(rows: &[ScoreRow]) -> Result<LossOutput> {
    ensure_rows(rows.len())?;
    let count: usize = rows.iter().map(|r| 1 + r.negatives.len()).sum();
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(rows.len());
    for row in rows {
        loss += softplus(-row.positive);
        let negatives = row
            .negatives
            .iter()
            .map(|&f| {
                loss += softplus(f);
                sigmoid(f) * scale
            })
            .collect();
        grads.push(RowGrad {
            positive: -sigmoid(-row.positive) * scale,
            negatives,
        });
    }
    Ok(LossOutput {
        loss: loss * scale,
        grads,
    })
}

/// Cosine contrastive loss: `1 - f_pos + (w / |N|) * sum max(0, f_neg - m)`,
/// averaged over rows. The hinge subgradient at `f_neg == m` is zero.
pub fn ccl_loss(rows: &[ScoreRow], margin: f64, weight: f64) -> Result<LossOutput> {
    ensure_rows(rows.len())?;
    let scale = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        if row.negatives.is_empty() {
            return Err(Error::Precondition(format!("row {r} has no negatives")));
        }
        let w = weight / row.negatives.len() as f64;
        let hinge: f64 = row.negatives.iter().map(|&f| (f - margin).max(0.0)).sum();
        loss += 1.0 - row.positive + w * hinge;
        grads.push(RowGrad {
            positive: -scale,
            negatives: row
                .negatives
                .iter()
                .map(|&f| if f > margin { w * scale } else { 0.0 })
                .collect(),
        });
    }
    Ok(LossOutput {
        loss: loss * scale,
        grads,
    })
}

/// Full softmax over the catalog, averaged over rows.
pub fn sm_loss(rows: &[CatalogRow]) -> Result<CatalogLossOutput> {
    ensure_rows(rows.len())?;
    let scale = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        if row.positive >= row.scores.len() {
            return Err(Error::Precondition(format!(
                "row {r}: positive {} outside catalog of {} scores",
                row.positive,
                row.scores.len()
            )));
        }
        let max = row.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.scores.iter().map(|f| (f - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += max + z.ln() - row.scores[row.positive];
        let mut g: Vec<f64> = exps.iter().map(|e| e / z * scale).collect();
        g[row.positive] -= scale;
        grads.push(g);
    }
    Ok(CatalogLossOutput {
        loss: loss * scale,
        grads,
    })
}

/// Positives and, per positive, the item ids to contrast against.
/// SM ignores `negatives` and scores the whole catalog.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<Vec<usize>>,
}

/// Vectors the score function is evaluated on: unit directions for
/// cosine, raw representations for inner product.
struct ScoreSpace<'a> {
    reps: &'a Representations,
    cosine: bool,
    unit_users: Matrix,
    unit_items: Matrix,
    user_norms: Vec<f64>,
    item_norms: Vec<f64>,
}

impl<'a> ScoreSpace<'a> {
    fn new(reps: &'a Representations, sim: Similarity, exec: Exec) -> Self {
        let cosine = sim == Similarity::Cosine;
        let normalize = |m: &Matrix| -> (Matrix, Vec<f64>) {
            if !cosine {
                return (Matrix::zeros(0, m.cols()), Vec::new());
            }
            let norms: Vec<f64> = exec.map(m.rows(), |r| norm(m.row(r)));
            let mut unit = m.clone();
            exec.for_each_row(unit.as_mut_slice(), m.cols(), |r, row| {
                let n = norms[r];
                if n < NORM_EPSILON {
                    row.fill(0.0);
                } else {
                    row.iter_mut().for_each(|x| *x /= n);
                }
            });
            (unit, norms)
        };
        let (unit_users, user_norms) = normalize(&reps.users);
        let (unit_items, item_norms) = normalize(&reps.items);
        Self {
            reps,
            cosine,
            unit_users,
            unit_items,
            user_norms,
            item_norms,
        }
    }

    fn user(&self, u: usize) -> &[f64] {
        if self.cosine {
            self.unit_users.row(u)
        } else {
            self.reps.users.row(u)
        }
    }

    fn item(&self, i: usize) -> &[f64] {
        if self.cosine {
            self.unit_items.row(i)
        } else {
            self.reps.items.row(i)
        }
    }

    /// Adds `g * d(raw score)/d z_target` to `out`, where `target` is
    /// the vector on one side and `other` the vector on the opposite side.
    fn accumulate(&self, out: &mut [f64], g: f64, target: &[f64], target_norm: f64, other: &[f64], x: f64) {
        if self.cosine {
            if target_norm < NORM_EPSILON {
                return;
            }
            let c = g / target_norm;
            for ((o, s_other), s_target) in out.iter_mut().zip(other).zip(target) {
                *o += c * (s_other - x * s_target);
            }
        } else {
            for (o, v) in out.iter_mut().zip(other) {
                *o += g * v;
            }
        }
    }
}

/// Batch loss and its gradient with respect to the final representations.
/// Regularization is not included.
pub fn batch_objective(
    cfg: &LossConfig,
    batch: &Batch,
    reps: &Representations,
    exec: Exec,
) -> Result<(f64, Representations)> {
    cfg.validate()?;
    let (m, n, d) = (reps.num_users(), reps.num_items(), reps.dim());
    let b = batch.positives.len();
    ensure_rows(b)?;
    if cfg.kind != LossKind::Sm && batch.negatives.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            actual: batch.negatives.len(),
        });
    }
    for (p, &(u, i)) in batch.positives.iter().enumerate() {
        let bad_neg = cfg.kind != LossKind::Sm && batch.negatives[p].iter().any(|&j| j >= n);
        if u >= m || i >= n || bad_neg {
            return Err(Error::Precondition(format!("batch row {p} references an id outside {m} x {n}")));
        }
    }
    if !reps.is_finite() {
        return Err(Error::NonFinite("representations".into()));
    }

    let space = ScoreSpace::new(reps, cfg.similarity, exec);
    let scale = cfg.score_scale();
    let catalog = cfg.kind == LossKind::Sm;
    let candidate = |p: usize, k: usize| -> usize {
        if catalog {
            k
        } else if k == 0 {
            batch.positives[p].1
        } else {
            batch.negatives[p][k - 1]
        }
    };
    let row_len = |p: usize| if catalog { n } else { 1 + batch.negatives[p].len() };

    // Raw similarities x (cosine in [-1, 1] or inner product) per slot.
    let raw: Vec<Vec<f64>> = exec.map(b, |p| {
        let zu = space.user(batch.positives[p].0);
        (0..row_len(p)).map(|k| dot(zu, space.item(candidate(p, k)))).collect()
    });

    // dL/df per slot, laid out like `raw`.
    let (loss, slot_grads): (f64, Vec<Vec<f64>>) = if catalog {
        let rows: Vec<CatalogRow> = raw
            .iter()
            .enumerate()
            .map(|(p, xs)| CatalogRow {
                positive: batch.positives[p].1,
                scores: xs.iter().map(|x| x * scale).collect(),
            })
            .collect();
        let out = sm_loss(&rows)?;
        (out.loss, out.grads)
    } else {
        let rows: Vec<ScoreRow> = raw
            .iter()
            .map(|xs| ScoreRow {
                positive: xs[0] * scale,
                negatives: xs[1..].iter().map(|x| x * scale).collect(),
            })
            .collect();
        let out = match cfg.kind {
            LossKind::Ssm => ssm_loss(&rows)?,
            LossKind::Bpr => bpr_loss(&rows)?,
            LossKind::Bce => bce_loss(&rows)?,
            LossKind::Ccl => ccl_loss(&rows, cfg.ccl_margin, cfg.ccl_weight)?,
            LossKind::Sm => unreachable!(),
        };
        let grads = out
            .grads
            .into_iter()
            .map(|g| std::iter::once(g.positive).chain(g.negatives).collect())
            .collect();
        (out.loss, grads)
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }

    // Anchor-side gradients, one vector per positive, scattered in order.
    let anchor_grads: Vec<Vec<f64>> = exec.map(b, |p| {
        let u = batch.positives[p].0;
        let su = space.user(u);
        let nu = space.user_norms.get(u).copied().unwrap_or(1.0);
        let mut acc = vec![0.0; d];
        for (k, (&g, &x)) in slot_grads[p].iter().zip(&raw[p]).enumerate() {
            if g != 0.0 {
                space.accumulate(&mut acc, g * scale, su, nu, space.item(candidate(p, k)), x);
            }
        }
        acc
    });
    let mut grad = Embeddings::zeros(m, n, d);
    for (p, g) in anchor_grads.iter().enumerate() {
        let row = grad.users.row_mut(batch.positives[p].0);
        row.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }

    // Item-side gradients: bucket slots by item, then each item sums its
    // slots in (anchor, slot) order.
    let mut counts = vec![0usize; n + 1];
    for p in 0..b {
        for k in 0..row_len(p) {
            counts[candidate(p, k) + 1] += 1;
        }
    }
    for j in 0..n {
        counts[j + 1] += counts[j];
    }
    let mut slots = vec![(0u32, 0u32); counts[n]];
    let mut fill = counts.clone();
    for p in 0..b {
        for k in 0..row_len(p) {
            let j = candidate(p, k);
            slots[fill[j]] = (p as u32, k as u32);
            fill[j] += 1;
        }
    }
    exec.for_each_row(grad.items.as_mut_slice(), d, |j, row| {
        let sj = space.item(j);
        let nj = space.item_norms.get(j).copied().unwrap_or(1.0);
        for &(p, k) in &slots[counts[j]..counts[j + 1]] {
            let (p, k) = (p as usize, k as usize);
            let g = slot_grads[p][k];
            if g != 0.0 {
                let su = space.user(batch.positives[p].0);
                space.accumulate(row, g * scale, sj, nj, su, raw[p][k]);
            }
        }
    });

    Ok((loss, grad))
}

/// Alias under the name used by the trainer and verification code.
pub fn grad_wrt_representations(
    cfg: &LossConfig,
    batch: &Batch,
    reps: &Representations,
    exec: Exec,
) -> Result<(f64, Representations)> {
    batch_objective(cfg, batch, reps, exec)
}
