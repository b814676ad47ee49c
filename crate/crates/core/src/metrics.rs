use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::sigmoid;

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Rank-based, `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Config("auc: scores and labels differ in length".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = labels.iter().filter(|&&l| l > 0.5).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("auc needs both classes"));
    }
    // sum of (1-based, tie-averaged) ranks of positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] > 0.5 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Mean binary cross-entropy of logits.
pub fn logloss(logits: &[f64], labels: &[f64]) -> f64 {
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &t)| z.max(0.0) - z * t + libm::log1p(libm::exp(-z.abs())))
        .sum::<f64>()
        / n
}

/// Expected AUC when example `i` is positive with probability `p[i]` and
/// examples are ranked by `scores`:
/// `sum p_i (1 - p_j) [s_i > s_j] / sum p_i (1 - p_j)` over `i != j`, ties
/// counted one half.
pub fn expected_auc(scores: &[f64], probs: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sweep in ascending score: negatives-mass below each tie group
    let mut neg_below = 0.0;
    let mut num = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..=j];
        let pos: f64 = group.iter().map(|&k| probs[k]).sum();
        let neg: f64 = group.iter().map(|&k| 1.0 - probs[k]).sum();
        let self_pairs: f64 = group.iter().map(|&k| probs[k] * (1.0 - probs[k])).sum();
        num += pos * neg_below + 0.5 * (pos * neg - self_pairs);
        neg_below += neg;
        i = j + 1;
    }
    let pos_total: f64 = probs.iter().sum();
    let neg_total: f64 = probs.iter().map(|p| 1.0 - p).sum();
    let self_total: f64 = probs.iter().map(|p| p * (1.0 - p)).sum();
    num / (pos_total * neg_total - self_total)
}

/// `sigmoid` over a slice.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&z| sigmoid(z)).collect()
}
