//! Ranking metrics for tagging and retrieval.

use crate::error::{MartError, Result};

fn check_len(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(MartError::dim(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MartError::Domain(format!("score {i} is not finite")));
    }
    Ok(())
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve as the fraction of concordant
/// positive/negative pairs, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MartError::UndefinedMetric(format!(
            "ROC-AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    // Walk from the highest score down, counting negatives already passed.
    let mut concordant2: u128 = 0;
    let mut neg_above: u128 = 0;
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i]).count() as u128;
        let n = g.len() as u128 - p;
        // Each positive beats every negative below it; ties count half.
        concordant2 += p * n;
        concordant2 += 2 * p * (neg as u128 - neg_above - n);
        neg_above += n;
    }
    Ok(concordant2 as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Average precision: precision at each distinct score threshold weighted
/// by the recall gained there.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(MartError::UndefinedMetric("PR-AUC needs at least one positive".into()));
    }
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i]).count();
        tp += p;
        seen += g.len();
        if p > 0 {
            ap += p as f64 / pos as f64 * tp as f64 / seen as f64;
        }
    }
    Ok(ap)
}

/// Average precision of a strict ranking given relevance flags in rank order.
pub fn average_precision(relevant: &[bool]) -> Result<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(MartError::UndefinedMetric("ranking has no relevant item".into()));
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (k, _) in relevant.iter().enumerate().filter(|(_, r)| **r) {
        hits += 1;
        sum += hits as f64 / (k + 1) as f64;
    }
    Ok(sum / total as f64)
}

/// Fraction of relevant items among the first `k` (or all, if fewer).
pub fn precision_at(relevant: &[bool], k: usize) -> Result<f64> {
    let n = k.min(relevant.len());
    if n == 0 {
        return Err(MartError::UndefinedMetric("precision of an empty ranking".into()));
    }
    Ok(relevant[..n].iter().filter(|&&r| r).count() as f64 / n as f64)
}

/// 1-based rank of the first relevant item.
pub fn first_relevant_rank(relevant: &[bool]) -> Result<usize> {
    relevant
        .iter()
        .position(|&r| r)
        .map(|p| p + 1)
        .ok_or_else(|| MartError::UndefinedMetric("ranking has no relevant item".into()))
}
