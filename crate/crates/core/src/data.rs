//! Interaction datasets: loading, k-core filtering, per-user splitting,
//! statistics and popularity grouping.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Immutable bipartite user-item graph. Both adjacency directions are kept
/// sorted and are exact transposes of each other.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionDataset {
    num_users: usize,
    num_items: usize,
    user_items: Vec<Vec<usize>>,
    item_users: Vec<Vec<usize>>,
    interaction_count: usize,
}

impl InteractionDataset {
    /// Builds a dataset from `(user, item)` pairs. Duplicate pairs are
    /// dropped; the number dropped is returned alongside.
    pub fn from_pairs(
        num_users: usize,
        num_items: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<(Self, usize)> {
        let mut user_items = vec![Vec::new(); num_users];
        let mut seen = 0usize;
        for (u, i) in pairs {
            if u >= num_users || i >= num_items {
                return Err(Error::Precondition(format!(
                    "interaction ({u}, {i}) outside {num_users} x {num_items}"
                )));
            }
            user_items[u].push(i);
            seen += 1;
        }
        for items in &mut user_items {
            items.sort_unstable();
            items.dedup();
        }
        let ds = Self::from_user_lists(num_items, user_items);
        let dropped = seen - ds.interaction_count;
        Ok((ds, dropped))
    }

    /// `user_items[u]` must already be sorted and duplicate-free, with every
    /// item id below `num_items`.
    fn from_user_lists(num_items: usize, user_items: Vec<Vec<usize>>) -> Self {
        let mut item_users = vec![Vec::new(); num_items];
        for (u, items) in user_items.iter().enumerate() {
            for &i in items {
                item_users[i].push(u);
            }
        }
        let interaction_count = user_items.iter().map(Vec::len).sum();
        Self {
            num_users: user_items.len(),
            num_items,
            user_items,
            item_users,
            interaction_count,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn interaction_count(&self) -> usize {
        self.interaction_count
    }

    pub fn is_empty(&self) -> bool {
        self.interaction_count == 0
    }

    /// Sorted items of user `u` (P_u).
    pub fn items_of(&self, u: usize) -> &[usize] {
        &self.user_items[u]
    }

    /// Sorted users of item `i` (P_i).
    pub fn users_of(&self, i: usize) -> &[usize] {
        &self.item_users[i]
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.user_items[u].len()
    }

    pub fn item_degree(&self, i: usize) -> usize {
        self.item_users[i].len()
    }

    pub fn user_lists(&self) -> &[Vec<usize>] {
        &self.user_items
    }

    pub fn item_lists(&self) -> &[Vec<usize>] {
        &self.item_users
    }

    pub fn contains(&self, u: usize, i: usize) -> bool {
        self.user_items
            .get(u)
            .is_some_and(|items| items.binary_search(&i).is_ok())
    }

    /// All interactions in user-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.user_items
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
    }

    /// Same id space, different interactions.
    fn with_user_lists(&self, user_items: Vec<Vec<usize>>) -> Self {
        Self::from_user_lists(self.num_items, user_items)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    /// One `user item` pair per row.
    #[serde(alias = "pairs")]
    PairList,
    /// `user item item ...` per row.
    #[serde(alias = "adjacency")]
    AdjacencyLines,
}

impl std::str::FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair-list" | "pairs" | "pair" => Ok(InputFormat::PairList),
            "adjacency-lines" | "adjacency" => Ok(InputFormat::AdjacencyLines),
            other => Err(Error::config(
                "format",
                format!("unknown format `{other}` (expected pair-list or adjacency-lines)"),
            )),
        }
    }
}

/// A dataset as read from disk, with the mapping back to the raw ids.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub dataset: InteractionDataset,
    /// `user_ids[dense] = original`.
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
    pub duplicates_dropped: usize,
}

/// Reads a whitespace-separated interaction file. Raw ids must be
/// non-negative integers; they are re-indexed densely in ascending order, so
/// files that are already 0-based and contiguous keep their ids.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<LoadedDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let mut tokens = line.split_whitespace();
        let Some(first) = tokens.next() else {
            continue;
        };
        let parse = |tok: &str| {
            tok.parse::<u64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("expected a non-negative integer id, found `{tok}`"),
            })
        };
        let user = parse(first)?;
        match format {
            InputFormat::PairList => {
                let rest: Vec<&str> = tokens.collect();
                if rest.len() != 1 {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        message: format!("expected 2 columns, found {}", rest.len() + 1),
                    });
                }
                raw.push((user, parse(rest[0])?));
            }
            InputFormat::AdjacencyLines => {
                for tok in tokens {
                    raw.push((user, parse(tok)?));
                }
            }
        }
    }
    if raw.is_empty() {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }

    let user_ids: Vec<u64> = raw.iter().map(|p| p.0).collect::<BTreeSet<_>>().into_iter().collect();
    let item_ids: Vec<u64> = raw.iter().map(|p| p.1).collect::<BTreeSet<_>>().into_iter().collect();
    let dense = |ids: &[u64], id: u64| ids.binary_search(&id).expect("id collected above");
    let pairs = raw
        .iter()
        .map(|&(u, i)| (dense(&user_ids, u), dense(&item_ids, i)));
    let (dataset, duplicates_dropped) =
        InteractionDataset::from_pairs(user_ids.len(), item_ids.len(), pairs)?;
    Ok(LoadedDataset {
        dataset,
        user_ids,
        item_ids,
        duplicates_dropped,
    })
}

/// Writes `original dense` rows, one per id.
pub fn write_id_map(path: &Path, ids: &[u64]) -> Result<()> {
    let mut out = String::with_capacity(ids.len() * 12);
    for (dense, original) in ids.iter().enumerate() {
        out.push_str(&format!("{original} {dense}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a dataset in adjacency-lines format using dense ids.
pub fn write_adjacency(path: &Path, ds: &InteractionDataset) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for (u, items) in ds.user_lists().iter().enumerate() {
        if items.is_empty() {
            continue;
        }
        buf.clear();
        buf.push_str(&u.to_string());
        for i in items {
            buf.push(' ');
            buf.push_str(&i.to_string());
        }
        buf.push('\n');
        file.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Result of k-core filtering, with the surviving original indices.
#[derive(Clone, Debug)]
pub struct KCore {
    pub dataset: InteractionDataset,
    /// `kept_users[new] = old`.
    pub kept_users: Vec<usize>,
    pub kept_items: Vec<usize>,
}

/// Repeatedly drops users and items with fewer than `k` interactions until
/// every remaining node has degree at least `k`, then re-indexes densely.
pub fn kcore_filter(ds: &InteractionDataset, k: usize) -> Result<KCore> {
    if k == 0 {
        return Err(Error::Precondition("k-core requires k >= 1".into()));
    }
    let mut user_alive = vec![true; ds.num_users()];
    let mut item_alive = vec![true; ds.num_items()];
    let mut user_deg: Vec<usize> = (0..ds.num_users()).map(|u| ds.user_degree(u)).collect();
    let mut item_deg: Vec<usize> = (0..ds.num_items()).map(|i| ds.item_degree(i)).collect();

    let mut stack_users: Vec<usize> = (0..ds.num_users()).filter(|&u| user_deg[u] < k).collect();
    let mut stack_items: Vec<usize> = (0..ds.num_items()).filter(|&i| item_deg[i] < k).collect();
    while !stack_users.is_empty() || !stack_items.is_empty() {
        while let Some(u) = stack_users.pop() {
            if !user_alive[u] {
                continue;
            }
            user_alive[u] = false;
            for &i in ds.items_of(u) {
                if item_alive[i] {
                    item_deg[i] -= 1;
                    if item_deg[i] < k {
                        stack_items.push(i);
                    }
                }
            }
        }
        while let Some(i) = stack_items.pop() {
            if !item_alive[i] {
                continue;
            }
            item_alive[i] = false;
            for &u in ds.users_of(i) {
                if user_alive[u] {
                    user_deg[u] -= 1;
                    if user_deg[u] < k {
                        stack_users.push(u);
                    }
                }
            }
        }
    }

    let kept_users: Vec<usize> = (0..ds.num_users()).filter(|&u| user_alive[u]).collect();
    let kept_items: Vec<usize> = (0..ds.num_items()).filter(|&i| item_alive[i]).collect();
    let mut item_new = vec![usize::MAX; ds.num_items()];
    for (new, &old) in kept_items.iter().enumerate() {
        item_new[old] = new;
    }
    let user_items = kept_users
        .iter()
        .map(|&u| {
            ds.items_of(u)
                .iter()
                .filter(|&&i| item_alive[i])
                .map(|&i| item_new[i])
                .collect()
        })
        .collect();
    Ok(KCore {
        dataset: InteractionDataset::from_user_lists(kept_items.len(), user_items),
        kept_users,
        kept_items,
    })
}

/// Fractions of each user's interactions assigned to train / validation;
/// the remainder goes to test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    /// `(n_train, n_val, n_test)` for a user with `n` interactions.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        // Slack absorbs representation error (0.7 * 10 is 6.999... in binary).
        let take = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
        let n_train = take(self.train).min(n);
        let n_val = take(self.validation).min(n - n_train);
        (n_train, n_val, n - n_train - n_val)
    }

    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::config("ratios", "must be finite and non-negative"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("ratios", "must sum to 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: InteractionDataset,
    pub validation: InteractionDataset,
    pub test: InteractionDataset,
}

/// Shuffles each user's items with a seeded generator and cuts them by
/// `ratios` (floor for train and validation, remainder to test). All three
/// parts share the source id space.
pub fn split_dataset(ds: &InteractionDataset, ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    ratios.validate()?;
    if let Some(u) = (0..ds.num_users()).find(|&u| ds.user_degree(u) == 0) {
        return Err(Error::Precondition(format!("user {u} has no interactions to split")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(ds.num_users());
    let mut validation = Vec::with_capacity(ds.num_users());
    let mut test = Vec::with_capacity(ds.num_users());
    for items in ds.user_lists() {
        let mut shuffled = items.clone();
        shuffled.shuffle(&mut rng);
        let (n_train, n_val, _) = ratios.counts(shuffled.len());
        let mut tr = shuffled[..n_train].to_vec();
        let mut va = shuffled[n_train..n_train + n_val].to_vec();
        let mut te = shuffled[n_train + n_val..].to_vec();
        tr.sort_unstable();
        va.sort_unstable();
        te.sort_unstable();
        train.push(tr);
        validation.push(va);
        test.push(te);
    }
    Ok(DatasetSplit {
        train: ds.with_user_lists(train),
        validation: ds.with_user_lists(validation),
        test: ds.with_user_lists(test),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density: f64,
}

pub fn compute_stats(ds: &InteractionDataset) -> DatasetStats {
    let cells = ds.num_users() as f64 * ds.num_items() as f64;
    DatasetStats {
        users: ds.num_users(),
        items: ds.num_items(),
        interactions: ds.interaction_count(),
        density: if cells > 0.0 {
            ds.interaction_count() as f64 / cells
        } else {
            0.0
        },
    }
}

/// Popularity groups: items ordered by training frequency and cut into
/// groups of (roughly) equal total interaction mass. Group 0 holds the
/// least popular items.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemGroups {
    group_of_item: Vec<usize>,
    group_mass: Vec<usize>,
}

impl ItemGroups {
    pub fn num_groups(&self) -> usize {
        self.group_mass.len()
    }

    pub fn group_of(&self, item: usize) -> usize {
        self.group_of_item[item]
    }

    pub fn group_of_item(&self) -> &[usize] {
        &self.group_of_item
    }

    pub fn group_mass(&self) -> &[usize] {
        &self.group_mass
    }
}

/// Sorts items by ascending frequency (ties by id) and fills groups in
/// order, closing group `g` once the running mass reaches
/// `(g + 1) * |D| / G`. The item that crosses a boundary stays in the
/// earlier group; the last group takes whatever remains.
pub fn partition_item_groups(train: &InteractionDataset, groups: usize) -> Result<ItemGroups> {
    if groups == 0 {
        return Err(Error::Precondition("need at least one group".into()));
    }
    if train.is_empty() {
        return Err(Error::Precondition("cannot group items of an empty dataset".into()));
    }
    if groups > train.num_items() {
        return Err(Error::Precondition(format!(
            "{groups} groups requested for {} items",
            train.num_items()
        )));
    }
    let mut order: Vec<usize> = (0..train.num_items()).collect();
    order.sort_by_key(|&i| (train.item_degree(i), i));

    let total = train.interaction_count() as f64;
    let mut group_of_item = vec![0; train.num_items()];
    let mut group_mass = vec![0; groups];
    let mut g = 0;
    let mut cumulative = 0usize;
    for &item in &order {
        let freq = train.item_degree(item);
        group_of_item[item] = g;
        group_mass[g] += freq;
        cumulative += freq;
        while g + 1 < groups && cumulative as f64 >= (g + 1) as f64 * total / groups as f64 {
            g += 1;
        }
    }
    Ok(ItemGroups {
        group_of_item,
        group_mass,
    })
}
