//! Ranking metrics over one user's candidate list.
//!
//! Ranks follow the convention `rank(i) = #{ j : s_j >= s_i }`, so the
//! top-scored item has rank 1 and tied items share the same rank. Items can
//! be masked out of the candidate set (used to hide training positives at
//! evaluation time); masked items take part in nothing: not in ranks, not as
//! AUC negatives.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One user's evaluation view: candidate scores, mask, and relevant items.
#[derive(Debug, Clone)]
pub struct RankedEval {
    /// Eligible (unmasked) candidate scores, ascending.
    sorted_scores: Vec<f64>,
    /// Scores of the relevant (test-positive) items.
    pos_scores: Vec<f64>,
    /// Scores of eligible non-relevant items, ascending.
    neg_scores_sorted: Vec<f64>,
}

impl RankedEval {
    /// Build from the full per-item score vector.
    ///
    /// `masked` items are removed from the candidate set entirely.
    /// `test_positives` must be disjoint from `masked` and non-empty for the
    /// metrics to be meaningful.
    pub fn new(all_scores: &[f64], masked: &[u32], test_positives: &[u32]) -> Self {
        let n = all_scores.len();
        let mut is_masked = vec![false; n];
        for &m in masked {
            is_masked[m as usize] = true;
        }
        let mut is_pos = vec![false; n];
        for &p in test_positives {
            debug_assert!(!is_masked[p as usize], "positive {p} is masked");
            is_pos[p as usize] = true;
        }

        let mut sorted_scores = Vec::with_capacity(n - masked.len());
        let mut pos_scores = Vec::with_capacity(test_positives.len());
        let mut neg_scores_sorted = Vec::new();
        for i in 0..n {
            if is_masked[i] {
                continue;
            }
            sorted_scores.push(all_scores[i]);
            if is_pos[i] {
                pos_scores.push(all_scores[i]);
            } else {
                neg_scores_sorted.push(all_scores[i]);
            }
        }
        sorted_scores.sort_unstable_by(f64::total_cmp);
        neg_scores_sorted.sort_unstable_by(f64::total_cmp);

        Self {
            sorted_scores,
            pos_scores,
            neg_scores_sorted,
        }
    }

    /// Number of eligible candidates.
    pub fn num_candidates(&self) -> usize {
        self.sorted_scores.len()
    }

    /// Number of relevant items.
    pub fn num_positives(&self) -> usize {
        self.pos_scores.len()
    }

    /// Number of eligible non-relevant items.
    pub fn num_negatives(&self) -> usize {
        self.neg_scores_sorted.len()
    }

    /// Rank of each relevant item: `#{ j eligible : s_j >= s_i }`.
    pub fn ranks(&self) -> Vec<usize> {
        let n = self.sorted_scores.len();
        self.pos_scores
            .iter()
            .map(|&s| n - self.sorted_scores.partition_point(|&x| x < s))
            .collect()
    }
}

/// Precision@K and Recall@K.
///
/// Returns `None` when the user has no relevant items (such users are
/// skipped, not counted as zero).
pub fn precision_recall_at_k(eval: &RankedEval, k: usize) -> Option<(f64, f64)> {
    if eval.num_positives() == 0 {
        return None;
    }
    let hits = eval.ranks().into_iter().filter(|&r| r <= k).count();
    Some((
        hits as f64 / k as f64,
        hits as f64 / eval.num_positives() as f64,
    ))
}

/// Binary-relevance NDCG@K: `DCG = sum 1/log2(1+rank)` over relevant items
/// ranked within K, normalized by the ideal DCG.
pub fn ndcg_at_k(eval: &RankedEval, k: usize) -> Option<f64> {
    let p = eval.num_positives();
    if p == 0 {
        return None;
    }
    let gain = |rank: usize| 1.0 / ((1 + rank) as f64).log2();
    let dcg: f64 = eval
        .ranks()
        .into_iter()
        .filter(|&r| r <= k)
        .map(gain)
        .sum();
    let idcg: f64 = (1..=p.min(k)).map(gain).sum();
    Some(dcg / idcg)
}

/// NDCG over the whole candidate list (no truncation).
pub fn ndcg_full(eval: &RankedEval) -> Option<f64> {
    ndcg_at_k(eval, eval.num_candidates())
}

/// MRR@K: reciprocal rank of the best-ranked relevant item, 0 if it falls
/// outside the top K.
pub fn mrr_at_k(eval: &RankedEval, k: usize) -> Option<f64> {
    if eval.num_positives() == 0 {
        return None;
    }
    let best = eval.ranks().into_iter().min().expect("nonempty");
    Some(if best <= k { 1.0 / best as f64 } else { 0.0 })
}

/// AUC: fraction of (positive, negative) pairs with `s_pos >= s_neg`.
/// Ties count in favor of the positive.
pub fn auc(eval: &RankedEval) -> Option<f64> {
    let p = eval.num_positives();
    let n = eval.num_negatives();
    if p == 0 || n == 0 {
        return None;
    }
    let mut good = 0usize;
    for &s in &eval.pos_scores {
        // Negatives with s_neg <= s_pos.
        good += eval.neg_scores_sorted.partition_point(|&x| x <= s);
    }
    Some(good as f64 / (p * n) as f64)
}

/// Lower-left partial AUC.
///
/// Only pairs where the positive scores at least `eta_alpha` (the
/// `ceil(alpha*|P|)`-th largest positive score) and the negative scores at
/// least `eta_beta` (the `ceil(beta*|N|)`-th largest negative score) are
/// counted; the denominator stays `|P|*|N|`.
pub fn llpauc(eval: &RankedEval, alpha: f64, beta: f64) -> Option<f64> {
    let p = eval.num_positives();
    let n = eval.num_negatives();
    if p == 0 || n == 0 {
        return None;
    }
    let eta_alpha = kth_largest(&eval.pos_scores, ceil_count(alpha, p));
    let eta_beta = kth_largest(&eval.neg_scores_sorted, ceil_count(beta, n));

    let mut good = 0usize;
    for &s in &eval.pos_scores {
        if s < eta_alpha {
            continue;
        }
        // Eligible negatives in [eta_beta, s].
        let le_pos = eval.neg_scores_sorted.partition_point(|&x| x <= s);
        let lt_eta = eval.neg_scores_sorted.partition_point(|&x| x < eta_beta);
        good += le_pos.saturating_sub(lt_eta);
    }
    Some(good as f64 / (p * n) as f64)
}

fn ceil_count(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64).ceil() as usize).clamp(1, total)
}

fn kth_largest(scores: &[f64], k: usize) -> f64 {
    debug_assert!(k >= 1 && k <= scores.len());
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    sorted[k - 1]
}

/// Per-cutoff metric values for a [`MetricReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

/// Run context a report was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub loss_family: String,
    pub tau: f64,
    pub seed: u64,
    pub epoch: Option<usize>,
    pub split: String,
}

/// Aggregated evaluation over users: averaged per-cutoff metrics plus AUC
/// and LLPAUC, with the evaluated-user count and run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cutoffs: BTreeMap<u32, CutoffMetrics>,
    pub auc: f64,
    pub llpauc: f64,
    pub llpauc_alpha: f64,
    pub llpauc_beta: f64,
    pub users_evaluated: usize,
    pub users_skipped: usize,
    pub meta: Option<RunMeta>,
}

impl MetricReport {
    pub fn precision_at(&self, k: u32) -> Option<f64> {
        self.cutoffs.get(&k).map(|c| c.precision)
    }

    pub fn recall_at(&self, k: u32) -> Option<f64> {
        self.cutoffs.get(&k).map(|c| c.recall)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
