use std::collections::HashMap;

use nalgebra::DVector;
use serde::Serialize;

use super::Corpus;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranked {
    pub id: String,
    pub score: f64,
}

/// Top-k documents, scores nonincreasing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankingResult {
    pub ranked: Vec<Ranked>,
}

pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b) / (a.norm() * b.norm())
}

/// Ranks `docs` by cosine similarity to `query`, ties by id ascending.
/// `k` is clamped to the number of documents.
pub fn cosine_rank(
    query_id: &str,
    query: &DVector<f64>,
    doc_ids: &[String],
    docs: &[DVector<f64>],
    k: usize,
) -> Result<RankingResult> {
    if doc_ids.len() != docs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} ids for {} vectors",
            doc_ids.len(),
            docs.len()
        )));
    }
    let qn = query.norm();
    if qn == 0.0 || !qn.is_finite() {
        return Err(Error::ZeroNorm {
            id: query_id.to_string(),
        });
    }
    let mut ranked = Vec::with_capacity(docs.len());
    for (id, v) in doc_ids.iter().zip(docs) {
        if v.len() != query.len() {
            return Err(Error::DimensionMismatch(format!(
                "document {id} has dim {}, query has {}",
                v.len(),
                query.len()
            )));
        }
        let dn = v.norm();
        if dn == 0.0 || !dn.is_finite() {
            return Err(Error::ZeroNorm { id: id.clone() });
        }
        ranked.push(Ranked {
            id: id.clone(),
            score: query.dot(v) / (qn * dn),
        });
    }
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    ranked.truncate(k);
    Ok(RankingResult { ranked })
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(r, g)| (2f64.powi(g as i32) - 1.0) / ((r + 2) as f64).log2())
        .sum()
}

/// NDCG@k with gain `2^grade - 1`. `None` when no judged document has a
/// positive grade, so the metric is undefined.
pub fn ndcg_at_k(
    ranking: &RankingResult,
    judgments: &HashMap<String, u32>,
    k: usize,
) -> Option<f64> {
    let mut ideal: Vec<u32> = judgments.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    if idcg == 0.0 {
        return None;
    }
    let actual = dcg(ranking
        .ranked
        .iter()
        .take(k)
        .map(|r| judgments.get(&r.id).copied().unwrap_or(0)));
    Some(actual / idcg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryMetric {
    pub query_id: String,
    pub ndcg: Option<f64>,
    pub ranking: RankingResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalMetrics {
    pub k: usize,
    pub per_query: Vec<QueryMetric>,
    /// Mean over queries with a defined metric.
    pub mean_ndcg: Option<f64>,
    pub skipped: usize,
}

/// Scores every query against every document.
pub fn evaluate_retrieval(
    corpus: &Corpus,
    doc_vecs: &[DVector<f64>],
    query_vecs: &[DVector<f64>],
    k: usize,
    exec: Execution,
) -> Result<RetrievalMetrics> {
    if doc_vecs.len() != corpus.docs.len() || query_vecs.len() != corpus.queries.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} doc / {} query vectors for {} docs / {} queries",
            doc_vecs.len(),
            query_vecs.len(),
            corpus.docs.len(),
            corpus.queries.len()
        )));
    }
    let doc_ids: Vec<String> = corpus.docs.iter().map(|d| d.id.clone()).collect();
    let per_query = exec::try_map_range(corpus.queries.len(), exec, |q| {
        let id = &corpus.queries[q].id;
        let ranking = cosine_rank(id, &query_vecs[q], &doc_ids, doc_vecs, k)?;
        let ndcg = ndcg_at_k(&ranking, &corpus.judgments_for(id), k);
        Ok::<_, Error>(QueryMetric {
            query_id: id.clone(),
            ndcg,
            ranking,
        })
    })?;
    let scored: Vec<f64> = per_query.iter().filter_map(|m| m.ndcg).collect();
    let skipped = per_query.len() - scored.len();
    let mean_ndcg = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(RetrievalMetrics {
        k,
        per_query,
        mean_ndcg,
        skipped,
    })
}
