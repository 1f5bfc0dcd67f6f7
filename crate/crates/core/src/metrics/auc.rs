//! Area under the ROC curve via the Mann-Whitney rank statistic.

use serde::{Deserialize, Serialize};

use super::counts::masks;
use crate::error::{Error, Result};

/// AUC of one class, or `None` when it lacks positives or negatives.
/// Tied scores count one half.
pub fn class_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub per_class: Vec<Option<f64>>,
    /// Mean over the classes that could be scored.
    pub macro_auc: Option<f64>,
    /// Classes without both positives and negatives.
    pub skipped: Vec<usize>,
}

/// `scores[r][k]` is recording `r`'s score for class `k`.
pub fn macro_auc(scores: &[Vec<f64>], true_sets: &[Vec<usize>], n: usize) -> Result<AucReport> {
    if scores.len() != true_sets.len() {
        return Err(Error::Data(format!(
            "{} score rows but {} label sets",
            scores.len(),
            true_sets.len()
        )));
    }
    if let Some(r) = scores.iter().position(|s| s.len() != n) {
        return Err(Error::Data(format!("score row {r} has {} entries, expected {n}", scores[r].len())));
    }
    let t = masks(true_sets, n)?;
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|k| {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let p: Vec<bool> = t.iter().map(|m| m[k]).collect();
            class_auc(&s, &p)
        })
        .collect();
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    let skipped = (0..n).filter(|&k| per_class[k].is_none()).collect();
    let macro_auc = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(AucReport { per_class, macro_auc, skipped })
}
