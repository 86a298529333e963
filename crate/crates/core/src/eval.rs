//! All-ranking top-K evaluation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, ItemGroups};
use crate::exec::Exec;
use crate::losses::{Similarity, NORM_EPSILON};
use crate::models::Representations;

/// Top-K items for one user, best first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedList {
    pub user: usize,
    pub items: Vec<usize>,
    /// Fewer than K candidates survived exclusion.
    pub short: bool,
}

fn by_score_then_id(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Ranks every item not rejected by `excluded`, keeping the best `k`. Ties
/// go to the smaller item id.
pub fn rank_items(user: usize, scores: &[f64], excluded: impl Fn(usize) -> bool, k: usize) -> RankedList {
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| !excluded(i)).collect();
    let short = candidates.len() < k;
    let cmp = by_score_then_id(scores);
    if candidates.len() > k && k > 0 {
        candidates.select_nth_unstable_by(k - 1, &cmp);
    }
    candidates.truncate(k);
    candidates.sort_unstable_by(&cmp);
    RankedList {
        user,
        items: candidates,
        short,
    }
}

/// Same as [`rank_items`] with a sorted exclusion list.
pub fn rank_items_excluding(user: usize, scores: &[f64], exclude: &[usize], k: usize) -> RankedList {
    rank_items(user, scores, |i| exclude.binary_search(&i).is_ok(), k)
}

fn hits<'a>(ranked: &'a RankedList, relevant: &'a [usize]) -> impl Iterator<Item = (usize, usize)> + 'a {
    ranked
        .items
        .iter()
        .enumerate()
        .filter(move |(_, i)| relevant.binary_search(i).is_ok())
        .map(|(r, &i)| (r, i))
}

/// `|top-K ∩ relevant| / |relevant|`; `None` when `relevant` is empty.
/// `relevant` must be sorted.
pub fn recall_at_k(ranked: &RankedList, relevant: &[usize]) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    Some(hits(ranked, relevant).count() as f64 / relevant.len() as f64)
}

/// Binary-gain NDCG with a `log2(1 + rank)` discount, normalized by the
/// ideal placement of `min(|relevant|, K)` items.
pub fn ndcg_at_k(ranked: &RankedList, relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let discount = |r: usize| 1.0 / ((r + 2) as f64).log2();
    let dcg: f64 = hits(ranked, relevant).map(|(r, _)| discount(r)).sum();
    let idcg: f64 = (0..relevant.len().min(k)).map(discount).sum();
    if idcg == 0.0 {
        return Some(0.0);
    }
    Some(dcg / idcg)
}

/// Per-user hit mass by popularity group: entry `g` is
/// `|top-K hits in group g| / |relevant|`.
fn user_group_recall(ranked: &RankedList, relevant: &[usize], groups: &ItemGroups) -> Vec<f64> {
    let mut out = vec![0.0; groups.num_groups()];
    let denom = relevant.len() as f64;
    for (_, item) in hits(ranked, relevant) {
        out[groups.group_of(item)] += 1.0 / denom;
    }
    out
}

/// Splits Recall@K into additive per-group contributions; the entries sum
/// to the overall recall. Users with empty relevant sets are skipped.
pub fn group_decompose(ranked: &[RankedList], relevant: &[&[usize]], groups: &ItemGroups) -> Vec<f64> {
    let mut totals = vec![0.0; groups.num_groups()];
    let mut users = 0usize;
    for (list, rel) in ranked.iter().zip(relevant) {
        if rel.is_empty() {
            continue;
        }
        users += 1;
        for (t, v) in totals.iter_mut().zip(user_group_recall(list, rel, groups)) {
            *t += v;
        }
    }
    if users > 0 {
        totals.iter_mut().for_each(|t| *t /= users as f64);
    }
    totals
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: f64,
    pub ndcg: f64,
    pub group_recall: Vec<f64>,
    pub k: usize,
    pub users_evaluated: usize,
    pub users_skipped: usize,
    /// Users for whom fewer than K candidates remained.
    #[serde(default)]
    pub short_lists: usize,
    /// Relevant items never seen in training; counted in group 0.
    #[serde(default)]
    pub zero_frequency_items: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "recall,ndcg,k,users_evaluated,users_skipped";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.recall, self.ndcg, self.k, self.users_evaluated, self.users_skipped
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions<'a> {
    pub k: usize,
    pub similarity: Similarity,
    pub groups: Option<&'a ItemGroups>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self {
            k: 20,
            similarity: Similarity::InnerProduct,
            groups: None,
        }
    }
}

struct UserResult {
    recall: f64,
    ndcg: f64,
    groups: Vec<f64>,
    short: bool,
    zero_freq: usize,
}

/// Ranks the full catalog for every user with a non-empty `target` list,
/// excluding the user's `train` items and any `also_exclude` items.
pub fn evaluate(
    reps: &Representations,
    train: &InteractionDataset,
    also_exclude: Option<&InteractionDataset>,
    target: &InteractionDataset,
    opts: EvalOptions<'_>,
    exec: Exec,
) -> EvalReport {
    let n = reps.num_items();
    let item_norms: Vec<f64> = (0..n)
        .map(|i| reps.items.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let num_groups = opts.groups.map_or(1, ItemGroups::num_groups);

    let per_user: Vec<Option<UserResult>> = exec.map(target.num_users(), |u| {
        let relevant = target.items_of(u);
        if relevant.is_empty() {
            return None;
        }
        let zu = reps.users.row(u);
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                let dot: f64 = zu.iter().zip(reps.items.row(i)).map(|(a, b)| a * b).sum();
                match opts.similarity {
                    Similarity::InnerProduct => dot,
                    // the user norm is a per-user constant and does not change the order
                    Similarity::Cosine if item_norms[i] < NORM_EPSILON => 0.0,
                    Similarity::Cosine => dot / item_norms[i],
                }
            })
            .collect();
        let seen = train.items_of(u);
        let extra: &[usize] = also_exclude.map_or(&[], |d| d.items_of(u));
        let ranked = rank_items(
            u,
            &scores,
            |i| seen.binary_search(&i).is_ok() || extra.binary_search(&i).is_ok(),
            opts.k,
        );
        let groups = match opts.groups {
            Some(g) => user_group_recall(&ranked, relevant, g),
            None => vec![recall_at_k(&ranked, relevant).unwrap_or(0.0)],
        };
        Some(UserResult {
            recall: recall_at_k(&ranked, relevant).unwrap_or(0.0),
            ndcg: ndcg_at_k(&ranked, relevant, opts.k).unwrap_or(0.0),
            groups,
            short: ranked.short,
            zero_freq: relevant.iter().filter(|&&i| train.item_degree(i) == 0).count(),
        })
    });

    let mut report = EvalReport {
        recall: 0.0,
        ndcg: 0.0,
        group_recall: vec![0.0; num_groups],
        k: opts.k,
        users_evaluated: 0,
        users_skipped: 0,
        short_lists: 0,
        zero_frequency_items: 0,
    };
    for r in &per_user {
        match r {
            None => report.users_skipped += 1,
            Some(r) => {
                report.users_evaluated += 1;
                report.recall += r.recall;
                report.ndcg += r.ndcg;
                for (t, v) in report.group_recall.iter_mut().zip(&r.groups) {
                    *t += v;
                }
                report.short_lists += r.short as usize;
                report.zero_frequency_items += r.zero_freq;
            }
        }
    }
    if report.users_evaluated > 0 {
        let m = report.users_evaluated as f64;
        report.recall /= m;
        report.ndcg /= m;
        report.group_recall.iter_mut().for_each(|t| *t /= m);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::partition_item_groups;

    #[test]
    fn rank_sorts_by_score() {
        let r = rank_items(0, &[0.1, 0.9, 0.5], |_| false, 2);
        assert_eq!(r.items, vec![1, 2]);
        assert!(!r.short);
    }

    #[test]
    fn rank_ties_by_id() {
        let r = rank_items(0, &[0.3; 6], |_| false, 4);
        assert_eq!(r.items, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rank_exclusion() {
        let r = rank_items_excluding(0, &[0.1, 0.9, 0.5], &[1], 1);
        assert_eq!(r.items, vec![2]);
    }

    #[test]
    fn rank_short_list() {
        let r = rank_items_excluding(0, &[0.1, 0.9, 0.5], &[0, 1], 2);
        assert_eq!(r.items, vec![2]);
        assert!(r.short);
    }

    #[test]
    fn rank_matches_full_sort() {
        let scores = [0.5, 0.2, 0.5, 0.9, 0.2, 0.1, 0.9, 0.0];
        let mut all: Vec<usize> = (0..scores.len()).collect();
        all.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        for k in 0..=scores.len() {
            assert_eq!(rank_items(0, &scores, |_| false, k).items, all[..k].to_vec());
        }
    }

    fn list(items: &[usize]) -> RankedList {
        RankedList {
            user: 0,
            items: items.to_vec(),
            short: false,
        }
    }

    #[test]
    fn recall_cases() {
        assert_eq!(recall_at_k(&list(&[1, 2, 3]), &[1, 3]), Some(1.0));
        assert_eq!(recall_at_k(&list(&[1, 2, 3]), &[4, 5]), Some(0.0));
        assert_eq!(recall_at_k(&list(&[1, 2, 3]), &[2, 7]), Some(0.5));
        assert_eq!(recall_at_k(&list(&[1, 2, 3]), &[]), None);
    }

    #[test]
    fn ndcg_cases() {
        assert_eq!(ndcg_at_k(&list(&[5, 1, 2]), &[5], 3), Some(1.0));
        let second = ndcg_at_k(&list(&[1, 5, 2]), &[5], 3).unwrap();
        assert!((second - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((second - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&list(&[5, 6, 2]), &[5, 6], 3), Some(1.0));
        assert!(ndcg_at_k(&list(&[2, 5, 6]), &[5, 6], 3).unwrap() < 1.0);
    }

    fn ds(m: usize, n: usize, pairs: &[(usize, usize)]) -> InteractionDataset {
        InteractionDataset::from_pairs(m, n, pairs.iter().copied()).unwrap().0
    }

    #[test]
    fn single_group_equals_recall() {
        let train = ds(1, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)]);
        let groups = partition_item_groups(&train, 1).unwrap();
        let lists = vec![list(&[0, 1]), list(&[3, 2])];
        let rel: Vec<&[usize]> = vec![&[1, 2], &[2]];
        let g = group_decompose(&lists, &rel, &groups);
        assert_eq!(g.len(), 1);
        assert!((g[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn hits_in_one_group() {
        // frequencies 1,1,1,3 -> two groups {0,1,2} and {3}
        let train = ds(3, 4, &[(0, 0), (1, 1), (2, 2), (0, 3), (1, 3), (2, 3)]);
        let groups = partition_item_groups(&train, 2).unwrap();
        let g = group_decompose(&[list(&[3, 0])], &[&[3]], &groups);
        assert_eq!(g, vec![0.0, 1.0]);
    }
}
