//! Cover-song style retrieval over an embedding set.

use std::cmp::Ordering;

use super::metrics::{average_precision, first_relevant_rank, precision_at};
use super::EmbeddingSet;
use crate::error::{MartError, Result};

/// Candidates for one query, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query: String,
    pub candidates: Vec<String>,
    pub similarities: Vec<f64>,
    pub relevant: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub map: f64,
    pub p_at_10: f64,
    pub mr1: f64,
    pub queries: usize,
    /// Queries whose clique has no other member.
    pub skipped: Vec<String>,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Ranks every other row of `set` against row `query` by descending cosine
/// similarity, breaking ties by ascending id.
pub fn rank_for(set: &EmbeddingSet, cliques: &[String], query: usize) -> Result<RankedList> {
    let ids = set.ids();
    let mut order: Vec<(usize, f64)> = (0..set.len())
        .filter(|&j| j != query)
        .map(|j| (j, cosine(set.row(query), set.row(j))))
        .collect();
    order.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => ids[a.0].cmp(&ids[b.0]),
        o => o,
    });
    Ok(RankedList {
        query: ids[query].clone(),
        candidates: order.iter().map(|&(j, _)| ids[j].clone()).collect(),
        similarities: order.iter().map(|&(_, s)| s).collect(),
        relevant: order.iter().map(|&(j, _)| cliques[j] == cliques[query]).collect(),
    })
}

/// MAP, precision at 10 and mean first-relevant rank with every track as a
/// query. `cliques` is aligned with the rows of `set`.
pub fn retrieval_eval(set: &EmbeddingSet, cliques: &[String]) -> Result<RetrievalReport> {
    if cliques.len() != set.len() {
        return Err(MartError::dim(format!(
            "{} clique labels for {} embeddings",
            cliques.len(),
            set.len()
        )));
    }
    for i in 0..set.len() {
        if set.row(i).iter().all(|&v| v == 0.0) {
            return Err(MartError::DegenerateVector(format!("embedding {:?} is zero", set.ids()[i])));
        }
    }
    let mut skipped = Vec::new();
    let (mut ap, mut p10, mut r1, mut n) = (0.0, 0.0, 0.0, 0usize);
    for q in 0..set.len() {
        let list = rank_for(set, cliques, q)?;
        if !list.relevant.contains(&true) {
            log::warn!("query {} skipped: its clique {:?} has no other member", list.query, cliques[q]);
            skipped.push(list.query);
            continue;
        }
        ap += average_precision(&list.relevant)?;
        p10 += precision_at(&list.relevant, 10)?;
        r1 += first_relevant_rank(&list.relevant)? as f64;
        n += 1;
    }
    if n == 0 {
        return Err(MartError::UndefinedMetric("no query has another clique member".into()));
    }
    let n_f = n as f64;
    Ok(RetrievalReport {
        map: ap / n_f,
        p_at_10: p10 / n_f,
        mr1: r1 / n_f,
        queries: n,
        skipped,
    })
}
