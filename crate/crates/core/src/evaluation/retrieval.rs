use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::store::EmbeddingStore;
use crate::error::{Error, Result};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ks: Vec<usize>,
    /// Recall at each entry of `ks`.
    pub recalls: Vec<f64>,
    /// Unweighted mean of `recalls`.
    pub mean_recall: f64,
    pub n_queries: usize,
}

impl RetrievalResult {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recalls[i])
    }
}

/// `a` ranks before `b`: higher score first, then smaller id.
fn outranks(a: (f64, &str), b: (f64, &str)) -> bool {
    match a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.1 < b.1,
    }
}

/// 1-based rank of the best-placed correct target among the candidates.
fn best_correct_rank(scores: &[(f64, &str)], correct: &[bool]) -> Option<usize> {
    let best = scores
        .iter()
        .zip(correct)
        .filter(|(_, &c)| c)
        .map(|(s, _)| *s)
        .reduce(|a, b| if outranks(b, a) { b } else { a })?;
    Some(1 + scores.iter().filter(|&&s| outranks(s, best)).count())
}

/// Recall@K of `queries` against `targets`.
///
/// Targets are ranked by cosine similarity, ties by ascending id. A query
/// counts as a hit at K when any of its correct targets is in the top K. A
/// target sharing the query's id is never a candidate (self-retrieval), and
/// K larger than the candidate set is clamped to it.
pub fn recall_at_k(
    queries: &EmbeddingStore,
    targets: &EmbeddingStore,
    truth: &BTreeMap<String, BTreeSet<String>>,
    ks: &[usize],
) -> Result<RetrievalResult> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("K values must be positive and non-empty".into()));
    }
    if queries.dim() != targets.dim() {
        return Err(Error::dimension("retrieval stores", queries.dim(), targets.dim()));
    }
    if queries.is_empty() {
        return Err(Error::Data("no retrieval queries".into()));
    }
    let mut hits = vec![0usize; ks.len()];
    for q in 0..queries.len() {
        let qid = queries.id(q);
        let correct_ids = truth
            .get(qid)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Data(format!("query {qid} has no correct targets")))?;
        let qv = queries.row(q);
        let mut scores = Vec::with_capacity(targets.len());
        let mut correct = Vec::with_capacity(targets.len());
        for t in 0..targets.len() {
            let tid = targets.id(t);
            if tid == qid {
                continue;
            }
            let s = qv.iter().zip(targets.row(t)).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
            scores.push((s, tid));
            correct.push(correct_ids.contains(tid));
        }
        let rank = best_correct_rank(&scores, &correct)
            .ok_or_else(|| Error::Data(format!("no correct target of query {qid} is in the target store")))?;
        for (i, &k) in ks.iter().enumerate() {
            if rank <= k.min(scores.len()) {
                hits[i] += 1;
            }
        }
    }
    let n = queries.len();
    let recalls: Vec<f64> = hits.iter().map(|&h| h as f64 / n as f64).collect();
    let mean_recall = recalls.iter().sum::<f64>() / recalls.len() as f64;
    Ok(RetrievalResult {
        ks: ks.to_vec(),
        recalls,
        mean_recall,
        n_queries: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::store::{RowMeta, Side};
    use crate::model::Embedding;

    fn store(rows: &[(&str, [f32; 2])]) -> EmbeddingStore {
        let mut s = EmbeddingStore::new(Side::Image, 2);
        for (id, v) in rows {
            s.push(RowMeta::new(*id), &Embedding::normalized(v).unwrap()).unwrap();
        }
        s
    }

    fn truth(pairs: &[(&str, &[&str])]) -> BTreeMap<String, BTreeSet<String>> {
        pairs
            .iter()
            .map(|(q, ts)| (q.to_string(), ts.iter().map(|t| t.to_string()).collect()))
            .collect()
    }

    #[test]
    fn single_item_database() {
        let q = store(&[("q", [1.0, 0.0])]);
        let t = store(&[("t", [1.0, 0.0])]);
        let r = recall_at_k(&q, &t, &truth(&[("q", &["t"])]), &DEFAULT_KS).unwrap();
        assert_eq!(r.recalls, vec![1.0, 1.0, 1.0]);
        assert_eq!(r.mean_recall, 1.0);
    }

    #[test]
    fn ranks_one_three_seven() {
        // ten targets along a fan; target k has the k-th highest similarity
        let angles: Vec<f32> = (0..10).map(|k| k as f32 * 0.1).collect();
        let targets: Vec<(String, [f32; 2])> = angles
            .iter()
            .enumerate()
            .map(|(k, a)| (format!("t{k}"), [a.cos(), a.sin()]))
            .collect();
        let t = store(&targets.iter().map(|(id, v)| (id.as_str(), *v)).collect::<Vec<_>>());
        let q = store(&[("a", [1.0, 0.0]), ("b", [1.0, 0.0]), ("c", [1.0, 0.0])]);
        let gt = truth(&[("a", &["t0"]), ("b", &["t2", "t9"]), ("c", &["t6"])]);
        let r = recall_at_k(&q, &t, &gt, &DEFAULT_KS).unwrap();
        assert_eq!(r.recalls, vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(r.mean_recall, (1.0 / 3.0 + 2.0 / 3.0 + 1.0) / 3.0);
    }

    #[test]
    fn ties_break_by_target_id_and_self_is_skipped() {
        let s = store(&[("x", [1.0, 0.0]), ("b", [0.0, 1.0]), ("a", [0.0, 1.0])]);
        // x sees a and b tied at 0, so a ranks first and b misses at K=1
        let gt = truth(&[("x", &["b"]), ("b", &["a"]), ("a", &["b"])]);
        let r = recall_at_k(&s, &s, &gt, &[1]).unwrap();
        assert_eq!(r.recalls, vec![2.0 / 3.0]);
    }

    #[test]
    fn empty_truth_names_query() {
        let q = store(&[("q7", [1.0, 0.0])]);
        let t = store(&[("t", [1.0, 0.0])]);
        let err = recall_at_k(&q, &t, &truth(&[("q7", &[])]), &[1]).unwrap_err();
        assert!(err.to_string().contains("q7"));
    }
}
