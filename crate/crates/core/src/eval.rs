//! Full-ranking top-K evaluation.

use std::cmp::Ordering;

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::InteractionGraph;

/// Default threshold below which an edge difference counts as sparse.
pub const SPARSITY_THRESHOLD: f64 = 0.2;

const USER_CHUNK: usize = 256;

/// Held-out test items and training items per user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    test: Vec<Vec<usize>>,
    train: Vec<Vec<usize>>,
}

impl GroundTruth {
    /// Both lists are indexed by user; each inner list is sorted and must be disjoint.
    pub fn new(mut test: Vec<Vec<usize>>, mut train: Vec<Vec<usize>>) -> Result<Self> {
        if test.len() != train.len() {
            return Err(Error::dim("ground truth users", train.len(), test.len()));
        }
        for (u, (t, tr)) in test.iter_mut().zip(train.iter_mut()).enumerate() {
            t.sort_unstable();
            t.dedup();
            tr.sort_unstable();
            tr.dedup();
            if let Some(&item) = t.iter().find(|i| tr.binary_search(i).is_ok()) {
                return Err(Error::InvalidParameter {
                    name: "ground truth",
                    reason: format!("user {u} has item {item} in both train and test"),
                });
            }
        }
        Ok(Self { test, train })
    }

    /// Builds ground truth from a training graph and test pairs, dropping
    /// test pairs that are training edges. Returns the number dropped.
    pub fn from_graph(graph: &InteractionGraph, test_pairs: &[(usize, usize)]) -> (Self, usize) {
        let n = graph.num_users();
        let train: Vec<Vec<usize>> = (0..n).map(|u| graph.user_items(u).collect()).collect();
        let mut test = vec![Vec::new(); n];
        let mut dropped = 0;
        for &(u, i) in test_pairs {
            if graph.has_edge(u, i) {
                dropped += 1;
            } else {
                test[u].push(i);
            }
        }
        for t in &mut test {
            t.sort_unstable();
            t.dedup();
        }
        (Self { test, train }, dropped)
    }

    pub fn num_users(&self) -> usize {
        self.test.len()
    }

    pub fn test_items(&self, user: usize) -> &[usize] {
        &self.test[user]
    }

    pub fn train_items(&self, user: usize) -> &[usize] {
        &self.train[user]
    }

    /// Users with at least one test item.
    pub fn eval_users(&self) -> Vec<usize> {
        (0..self.test.len()).filter(|&u| !self.test[u].is_empty()).collect()
    }

    pub fn test_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.test
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
    }
}

/// Per-user ranked recommendations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList {
    pub users: Vec<usize>,
    pub items: Vec<Vec<usize>>,
}

/// Inner-product scores of `users` against every item; one row per user.
pub fn score_users(final_emb: ArrayView2<f64>, num_users: usize, users: &[usize]) -> Result<Array2<f64>> {
    if num_users > final_emb.nrows() {
        return Err(Error::dim(
            "embedding rows",
            format!(">= {num_users}"),
            final_emb.nrows(),
        ));
    }
    if let Some(&bad) = users.iter().find(|&&u| u >= num_users) {
        return Err(Error::InvalidParameter {
            name: "users",
            reason: format!("unknown user index {bad}"),
        });
    }
    let user_emb = final_emb.select(Axis(0), users);
    let item_emb = final_emb.slice(s![num_users.., ..]);
    Ok(user_emb.dot(&item_emb.t()))
}

fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Top `k` items by descending score, skipping `exclude` (sorted). Ties go to the lower index.
pub fn top_k(scores: &[f64], exclude: &[usize], k: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..scores.len())
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    let k = k.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    candidates
}

/// Ranks the top `k` items for every user with test items.
pub fn rank_users(final_emb: ArrayView2<f64>, truth: &GroundTruth, k: usize) -> Result<RankedList> {
    let users = truth.eval_users();
    let items = users
        .par_chunks(USER_CHUNK)
        .map(|chunk| {
            let scores = score_users(final_emb, truth.num_users(), chunk)?;
            Ok(chunk
                .iter()
                .zip(scores.rows())
                .map(|(&u, row)| top_k(row.as_slice().expect("standard layout"), truth.train_items(u), k))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok(RankedList { users, items })
}

fn hits<'a>(ranked: &'a [usize], test: &'a [usize], k: usize) -> impl Iterator<Item = usize> + 'a {
    ranked[..k.min(ranked.len())]
        .iter()
        .enumerate()
        .filter(move |(_, item)| test.binary_search(item).is_ok())
        .map(|(r, _)| r)
}

/// Per-user recall values for users with test items.
pub fn recall_per_user(ranked: &RankedList, truth: &GroundTruth, k: usize) -> Vec<f64> {
    ranked
        .users
        .iter()
        .zip(&ranked.items)
        .filter(|(&u, _)| !truth.test_items(u).is_empty())
        .map(|(&u, items)| {
            let test = truth.test_items(u);
            hits(items, test, k).count() as f64 / test.len() as f64
        })
        .collect()
}

/// Per-user binary-relevance NDCG values for users with test items.
pub fn ndcg_per_user(ranked: &RankedList, truth: &GroundTruth, k: usize) -> Vec<f64> {
    let discount = |r: usize| 1.0 / ((r + 2) as f64).log2();
    ranked
        .users
        .iter()
        .zip(&ranked.items)
        .filter(|(&u, _)| !truth.test_items(u).is_empty())
        .map(|(&u, items)| {
            let test = truth.test_items(u);
            let dcg: f64 = hits(items, test, k).map(discount).sum();
            let ideal: f64 = (0..k.min(test.len())).map(discount).sum();
            dcg / ideal
        })
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn recall_at_k(ranked: &RankedList, truth: &GroundTruth, k: usize) -> f64 {
    mean(&recall_per_user(ranked, truth, k))
}

pub fn ndcg_at_k(ranked: &RankedList, truth: &GroundTruth, k: usize) -> f64 {
    mean(&ndcg_per_user(ranked, truth, k))
}

/// Expected Recall@K of a uniformly random ranking of each user's non-training items.
pub fn random_recall_expectation(truth: &GroundTruth, num_items: usize, k: usize) -> f64 {
    let per_user: Vec<f64> = truth
        .eval_users()
        .into_iter()
        .map(|u| {
            let candidates = num_items - truth.train_items(u).len();
            k.min(candidates) as f64 / candidates as f64
        })
        .collect();
    mean(&per_user)
}

/// Fraction of entries with `|x| < threshold`.
pub fn sparsity_ratio(edge_diffs: ArrayView2<f64>, threshold: f64) -> Result<f64> {
    if edge_diffs.is_empty() {
        return Err(Error::InvalidParameter {
            name: "edge_diffs",
            reason: "empty matrix".into(),
        });
    }
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "threshold",
            reason: format!("{threshold} must be positive"),
        });
    }
    let sparse = edge_diffs.iter().filter(|x| x.abs() < threshold).count();
    Ok(sparse as f64 / edge_diffs.len() as f64)
}

/// One metric value, serialized as `{metric, K, value, n_users}`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub value: f64,
    pub n_users: usize,
}

/// Recall@K and NDCG@K for every `k` in `ks`.
pub fn evaluate(final_emb: ArrayView2<f64>, truth: &GroundTruth, ks: &[usize]) -> Result<Vec<MetricRecord>> {
    if ks.contains(&0) {
        return Err(Error::InvalidParameter {
            name: "K",
            reason: "must be at least 1".into(),
        });
    }
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let ranked = rank_users(final_emb, truth, k_max)?;
    let n_users = ranked.users.len();
    let mut records = Vec::with_capacity(2 * ks.len());
    for &k in ks {
        records.push(MetricRecord {
            metric: format!("Recall@{k}"),
            k,
            value: recall_at_k(&ranked, truth, k),
            n_users,
        });
        records.push(MetricRecord {
            metric: format!("NDCG@{k}"),
            k,
            value: ndcg_at_k(&ranked, truth, k),
            n_users,
        });
    }
    Ok(records)
}
