//! Recommenders as linear maps from layer-0 embeddings to final
//! representations: MF, user- and item-side SVD++, and LightGCN.
//!
//! Every model here is linear in the embedding tables, so `backward` is the
//! adjoint of `forward` and needs no cached activations.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Dense row-major `rows x cols` matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// A pair of user and item matrices with a shared width. Used for the
/// layer-0 tables, the final representations and gradients of either.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub users: Matrix,
    pub items: Matrix,
}

/// Layer-0 parameters p_u, q_i.
pub type EmbeddingTable = Embeddings;
/// Final representations z_u, z_i.
pub type Representations = Embeddings;

impl Embeddings {
    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        Self {
            users: Matrix::zeros(num_users, dim),
            items: Matrix::zeros(num_items, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    pub fn num_users(&self) -> usize {
        self.users.rows()
    }

    pub fn num_items(&self) -> usize {
        self.items.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.users.is_finite() && self.items.is_finite()
    }

    pub fn dot(&self, other: &Embeddings) -> f64 {
        self.users.dot(&other.users) + self.items.dot(&other.items)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn add_assign(&mut self, other: &Embeddings) {
        self.users.add_assign(&other.users);
        self.items.add_assign(&other.items);
    }

    pub fn scale(&mut self, s: f64) {
        self.users.scale(s);
        self.items.scale(s);
    }

    /// Users then items, flattened.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.users.as_slice().to_vec();
        v.extend_from_slice(self.items.as_slice());
        v
    }

    pub fn from_flat(num_users: usize, num_items: usize, dim: usize, flat: &[f64]) -> Result<Self> {
        let split = num_users * dim;
        if flat.len() != split + num_items * dim {
            return Err(Error::DimensionMismatch {
                expected: split + num_items * dim,
                actual: flat.len(),
            });
        }
        Ok(Self {
            users: Matrix::from_vec(num_users, dim, flat[..split].to_vec())?,
            items: Matrix::from_vec(num_items, dim, flat[split..].to_vec())?,
        })
    }

    fn check_graph(&self, graph: &InteractionDataset) -> Result<()> {
        if self.num_users() != graph.num_users() {
            return Err(Error::DimensionMismatch {
                expected: graph.num_users(),
                actual: self.num_users(),
            });
        }
        if self.num_items() != graph.num_items() {
            return Err(Error::DimensionMismatch {
                expected: graph.num_items(),
                actual: self.num_items(),
            });
        }
        if self.items.cols() != self.users.cols() {
            return Err(Error::DimensionMismatch {
                expected: self.users.cols(),
                actual: self.items.cols(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "MF", alias = "mf")]
    Mf,
    #[serde(rename = "SVDpp_user", alias = "svdpp_user")]
    SvdppUser,
    #[serde(rename = "SVDpp_item", alias = "svdpp_item")]
    SvdppItem,
    #[serde(rename = "LightGCN", alias = "lightgcn")]
    LightGcn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommenderConfig {
    pub kind: ModelKind,
    /// Exponent on the receiving node's degree.
    #[serde(default = "default_alpha0")]
    pub alpha0: f64,
    /// Exponent on the sending node's degree.
    #[serde(default)]
    pub alpha1: f64,
    #[serde(default = "default_layers")]
    pub layers: usize,
}

fn default_alpha0() -> f64 {
    0.5
}

fn default_layers() -> usize {
    2
}

/// LightGCN's symmetric normalization.
pub const LIGHTGCN_EXPONENT: f64 = 0.5;

impl RecommenderConfig {
    pub fn mf() -> Self {
        Self {
            kind: ModelKind::Mf,
            alpha0: default_alpha0(),
            alpha1: 0.0,
            layers: 0,
        }
    }

    pub fn svdpp_user(alpha0: f64, alpha1: f64) -> Self {
        Self {
            kind: ModelKind::SvdppUser,
            alpha0,
            alpha1,
            layers: 1,
        }
    }

    pub fn svdpp_item(alpha0: f64, alpha1: f64) -> Self {
        Self {
            kind: ModelKind::SvdppItem,
            alpha0,
            alpha1,
            layers: 1,
        }
    }

    pub fn lightgcn(layers: usize) -> Self {
        Self {
            kind: ModelKind::LightGcn,
            alpha0: LIGHTGCN_EXPONENT,
            alpha1: LIGHTGCN_EXPONENT,
            layers,
        }
    }

    /// Exponents `forward` actually uses; LightGCN ignores the configured
    /// pair and MF does no propagation.
    pub fn effective_exponents(&self) -> Option<(f64, f64)> {
        match self.kind {
            ModelKind::Mf => None,
            ModelKind::LightGcn => Some((LIGHTGCN_EXPONENT, LIGHTGCN_EXPONENT)),
            ModelKind::SvdppUser | ModelKind::SvdppItem => Some((self.alpha0, self.alpha1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("model.alpha0", self.alpha0), ("model.alpha1", self.alpha1)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(name, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ItemToUser,
    UserToItem,
}

impl Direction {
    pub fn reversed(self) -> Self {
        match self {
            Direction::ItemToUser => Direction::UserToItem,
            Direction::UserToItem => Direction::ItemToUser,
        }
    }
}

/// One degree-normalized aggregation step. Target `t` receives
/// `sum_{s in N(t)} source_s / (|N(t)|^alpha0 * |N(s)|^alpha1)`; targets with
/// no neighbors receive zero.
pub fn propagate(
    graph: &InteractionDataset,
    source: &Matrix,
    direction: Direction,
    alpha0: f64,
    alpha1: f64,
    exec: Exec,
) -> Result<Matrix> {
    let (targets, sources, n_targets, n_sources) = match direction {
        Direction::ItemToUser => (
            graph.user_lists(),
            graph.item_lists(),
            graph.num_users(),
            graph.num_items(),
        ),
        Direction::UserToItem => (
            graph.item_lists(),
            graph.user_lists(),
            graph.num_items(),
            graph.num_users(),
        ),
    };
    if source.rows() != n_sources {
        return Err(Error::DimensionMismatch {
            expected: n_sources,
            actual: source.rows(),
        });
    }
    let dim = source.cols();
    let source_scale: Vec<f64> = sources
        .iter()
        .map(|nbrs| degree_scale(nbrs.len(), alpha1))
        .collect();
    let mut out = Matrix::zeros(n_targets, dim);
    exec.for_each_row(out.as_mut_slice(), dim, |t, row| {
        let nbrs = &targets[t];
        if nbrs.is_empty() {
            return;
        }
        let target_scale = degree_scale(nbrs.len(), alpha0);
        for &s in nbrs {
            let c = target_scale * source_scale[s];
            for (o, x) in row.iter_mut().zip(source.row(s)) {
                *o += c * x;
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`propagate`]: same edge coefficients, opposite direction.
pub fn propagate_adjoint(
    graph: &InteractionDataset,
    grad: &Matrix,
    direction: Direction,
    alpha0: f64,
    alpha1: f64,
    exec: Exec,
) -> Result<Matrix> {
    propagate(graph, grad, direction.reversed(), alpha1, alpha0, exec)
}

fn degree_scale(degree: usize, exponent: f64) -> f64 {
    if degree == 0 {
        0.0
    } else if exponent == 0.0 {
        1.0
    } else {
        (degree as f64).powf(-exponent)
    }
}

/// Final representations from layer-0 embeddings. `graph` must be the
/// training split.
///
/// SVD++ variants aggregate layer-0 vectors of the opposite side; LightGCN
/// propagates each layer's output into the next and averages layers
/// `0..=K` with weight `1 / (K + 1)`.
pub fn forward(
    cfg: &RecommenderConfig,
    emb: &EmbeddingTable,
    graph: &InteractionDataset,
    exec: Exec,
) -> Result<Representations> {
    emb.check_graph(graph)?;
    match cfg.kind {
        ModelKind::Mf => Ok(emb.clone()),
        ModelKind::SvdppUser => {
            let mut users = propagate(graph, &emb.items, Direction::ItemToUser, cfg.alpha0, cfg.alpha1, exec)?;
            users.add_assign(&emb.users);
            Ok(Embeddings {
                users,
                items: emb.items.clone(),
            })
        }
        ModelKind::SvdppItem => {
            let mut items = propagate(graph, &emb.users, Direction::UserToItem, cfg.alpha0, cfg.alpha1, exec)?;
            items.add_assign(&emb.items);
            Ok(Embeddings {
                users: emb.users.clone(),
                items,
            })
        }
        ModelKind::LightGcn => {
            let a = LIGHTGCN_EXPONENT;
            let mut sum = emb.clone();
            let mut layer = emb.clone();
            for _ in 0..cfg.layers {
                let users = propagate(graph, &layer.items, Direction::ItemToUser, a, a, exec)?;
                let items = propagate(graph, &layer.users, Direction::UserToItem, a, a, exec)?;
                layer = Embeddings { users, items };
                sum.add_assign(&layer);
            }
            sum.scale(1.0 / (cfg.layers + 1) as f64);
            Ok(sum)
        }
    }
}

/// Gradient with respect to the layer-0 tables, given the gradient with
/// respect to the final representations.
pub fn backward(
    cfg: &RecommenderConfig,
    graph: &InteractionDataset,
    grad_repr: &Representations,
    exec: Exec,
) -> Result<EmbeddingTable> {
    grad_repr.check_graph(graph)?;
    match cfg.kind {
        ModelKind::Mf => Ok(grad_repr.clone()),
        ModelKind::SvdppUser => {
            let mut items = propagate_adjoint(
                graph,
                &grad_repr.users,
                Direction::ItemToUser,
                cfg.alpha0,
                cfg.alpha1,
                exec,
            )?;
            items.add_assign(&grad_repr.items);
            Ok(Embeddings {
                users: grad_repr.users.clone(),
                items,
            })
        }
        ModelKind::SvdppItem => {
            let mut users = propagate_adjoint(
                graph,
                &grad_repr.items,
                Direction::UserToItem,
                cfg.alpha0,
                cfg.alpha1,
                exec,
            )?;
            users.add_assign(&grad_repr.users);
            Ok(Embeddings {
                users,
                items: grad_repr.items.clone(),
            })
        }
        ModelKind::LightGcn => {
            let a = LIGHTGCN_EXPONENT;
            let mut share = grad_repr.clone();
            share.scale(1.0 / (cfg.layers + 1) as f64);
            // Reverse sweep: the gradient reaching layer k-1 is its own share
            // plus the adjoint of the step that produced layer k.
            let mut acc = share.clone();
            for _ in 0..cfg.layers {
                let users = propagate_adjoint(graph, &acc.items, Direction::UserToItem, a, a, exec)?;
                let items = propagate_adjoint(graph, &acc.users, Direction::ItemToUser, a, a, exec)?;
                acc = Embeddings { users, items };
                acc.add_assign(&share);
            }
            Ok(acc)
        }
    }
}

/// Xavier-uniform tables with `fan_in = fan_out = dim`.
pub fn init_xavier(num_users: usize, num_items: usize, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(Error::config("dim", "must be at least 1"));
    }
    let bound = xavier_bound(dim);
    let dist = Uniform::new_inclusive(-bound, bound).expect("bound is finite and positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| (0..n).map(|_| dist.sample(&mut rng)).collect::<Vec<_>>();
    let users = Matrix::from_vec(num_users, dim, draw(num_users * dim))?;
    let items = Matrix::from_vec(num_items, dim, draw(num_items * dim))?;
    Ok(Embeddings { users, items })
}

pub fn xavier_bound(dim: usize) -> f64 {
    (6.0 / (2 * dim) as f64).sqrt()
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SSMREMB\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes the binary checkpoint: 8-byte magic, u32 version, u64 M, N, d,
/// then user rows and item rows as little-endian f64.
pub fn save_embeddings(path: &Path, emb: &EmbeddingTable) -> Result<()> {
    let mut buf = Vec::with_capacity(36 + 8 * (emb.users.as_slice().len() + emb.items.as_slice().len()));
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for n in [emb.num_users(), emb.num_items(), emb.dim()] {
        buf.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for x in emb.users.as_slice().iter().chain(emb.items.as_slice()) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < 36 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not an embedding checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let read_u64 = |at: usize| u64::from_le_bytes(buf[at..at + 8].try_into().unwrap()) as usize;
    let (m, n, d) = (read_u64(12), read_u64(20), read_u64(28));
    let expected = (m + n)
        .checked_mul(d)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(36));
    if expected != Some(buf.len()) {
        return Err(Error::Checkpoint(format!(
            "header says {m}x{d} + {n}x{d} but file has {} bytes",
            buf.len()
        )));
    }
    let values: Vec<f64> = buf[36..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Embeddings::from_flat(m, n, d, &values)
}
