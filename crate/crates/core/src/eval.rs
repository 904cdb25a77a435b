//! Ranking by representation similarity and the top-5 metric suite.
//!
//! Metric conventions (binary relevance, cutoff `k`, default 5):
//!
//! * `P@k = |top_k ∩ rel| / k`, averaged over all queries.
//! * `R@k = |top_k ∩ rel| / |rel|`, averaged over queries with `|rel| > 0`.
//! * Micro F1 pools TP, FP and FN over all queries at the cutoff.
//! * Macro F1 is the harmonic mean of macro P@k and macro R@k by default;
//!   [`MacroF1`] switches to the mean of per-query F1.
//! * `MRR@k` is `1 / rank` of the first relevant hit within the cutoff, averaged
//!   over all queries.
//! * `MAP` uses the full ranking; relevant documents never retrieved count as
//!   zero precision. Averaged over queries with `|rel| > 0`.
//! * `NDCG@k` uses gain 1 and discount `log2(rank + 1)`, ideal DCG from
//!   `min(|rel|, k)` hits. Averaged over queries with `|rel| > 0`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bm25::Bm25Index;
use crate::corpus::Labels;
use crate::model::Similarity;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub ranking: Vec<(String, f64)>,
}

impl RankedList {
    /// Sorts by descending score, then ascending id; later duplicates of an
    /// id are dropped.
    pub fn from_scores(query_id: &str, mut scored: Vec<(String, f64)>) -> Self {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut seen = BTreeSet::new();
        scored.retain(|(id, _)| seen.insert(id.clone()));
        Self {
            query_id: query_id.to_string(),
            ranking: scored,
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.ranking.iter().map(|(id, _)| id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.ranking.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranking.is_empty()
    }

    pub fn truncate(&mut self, k: usize) {
        self.ranking.truncate(k);
    }
}

/// Case vectors keyed by id, in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct EmbeddedPool {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl EmbeddedPool {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        let mut pool = Self::default();
        for (id, v) in entries {
            pool.index.insert(id.clone(), pool.ids.len());
            pool.ids.push(id);
            pool.vectors.push(v);
        }
        pool
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids.iter().map(String::as_str).zip(self.vectors.iter().map(Vec::as_slice))
    }
}

/// Ranks every pool member except the query itself by similarity.
pub fn rank_one_stage(
    query_id: &str,
    query_vec: &[f64],
    pool: &EmbeddedPool,
    similarity: Similarity,
) -> RankedList {
    let scored = pool
        .iter()
        .filter(|(id, _)| *id != query_id)
        .map(|(id, v)| (id.to_string(), similarity.score(query_vec, v)))
        .collect();
    RankedList::from_scores(query_id, scored)
}

/// Reranks BM25's top `first_stage_k` (query excluded) by similarity.
/// Candidates missing from `pool` keep their BM25 position at the end.
pub fn rank_two_stage(
    query_id: &str,
    query_text: &str,
    query_vec: &[f64],
    pool: &EmbeddedPool,
    bm25: &Bm25Index,
    first_stage_k: usize,
    similarity: Similarity,
) -> RankedList {
    let exclude: BTreeSet<String> = [query_id.to_string()].into();
    let first = bm25.top_k(query_id, query_text, first_stage_k, &exclude);
    let mut scored = Vec::with_capacity(first.len());
    let mut missing = Vec::new();
    for (id, _) in &first.ranking {
        match pool.get(id) {
            Some(v) => scored.push((id.clone(), similarity.score(query_vec, v))),
            None => missing.push(id.clone()),
        }
    }
    let mut list = RankedList::from_scores(query_id, scored);
    if !missing.is_empty() {
        log::warn!("{} first-stage candidates have no representation", missing.len());
        list.ranking
            .extend(missing.into_iter().map(|id| (id, f64::NEG_INFINITY)));
    }
    list
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MacroF1 {
    /// Harmonic mean of macro-averaged precision and recall.
    #[default]
    HarmonicOfMeans,
    /// Mean over queries of per-query F1.
    MeanOfPerQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub mrr: f64,
    pub map: f64,
    pub ndcg: f64,
    pub queries: usize,
    pub cutoff: usize,
}

impl EvalReport {
    pub fn metrics(&self) -> [(&'static str, f64); 7] {
        [
            ("P@5", self.precision),
            ("R@5", self.recall),
            ("Mi-F1", self.micro_f1),
            ("Ma-F1", self.macro_f1),
            ("MRR@5", self.mrr),
            ("MAP", self.map),
            ("NDCG@5", self.ndcg),
        ]
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = self.cutoff;
        let names = [
            format!("P@{k}"),
            format!("R@{k}"),
            "Mi-F1".to_string(),
            "Ma-F1".to_string(),
            format!("MRR@{k}"),
            "MAP".to_string(),
            format!("NDCG@{k}"),
        ];
        for n in &names {
            write!(f, "{n:>8}")?;
        }
        writeln!(f)?;
        for (_, v) in self.metrics() {
            write!(f, "{:>8.2}", 100.0 * v)?;
        }
        writeln!(f)?;
        write!(f, "({} queries, values in %)", self.queries)
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn evaluate(rankings: &[RankedList], labels: &Labels, cutoff: usize) -> EvalReport {
    evaluate_with(rankings, labels, cutoff, MacroF1::default())
}

/// Queries missing from `labels` are treated as having no relevant cases.
pub fn evaluate_with(
    rankings: &[RankedList],
    labels: &Labels,
    cutoff: usize,
    macro_f1: MacroF1,
) -> EvalReport {
    let empty = BTreeSet::new();
    let (mut precisions, mut recalls, mut rrs, mut aps, mut ndcgs, mut f1s) =
        (vec![], vec![], vec![], vec![], vec![], vec![]);
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for list in rankings {
        let relevant = labels.get(&list.query_id).unwrap_or(&empty);
        let top: Vec<&str> = list.ranking.iter().take(cutoff).map(|(id, _)| id.as_str()).collect();
        let hits = top.iter().filter(|id| relevant.contains(**id)).count();
        tp += hits;
        fp += top.len() - hits;
        fn_ += relevant.len().saturating_sub(hits);

        let p = if cutoff == 0 { 0.0 } else { hits as f64 / cutoff as f64 };
        precisions.push(p);
        rrs.push(
            top.iter()
                .position(|id| relevant.contains(*id))
                .map_or(0.0, |i| 1.0 / (i + 1) as f64),
        );
        if relevant.is_empty() {
            f1s.push(0.0);
            continue;
        }
        let r = hits as f64 / relevant.len() as f64;
        recalls.push(r);
        f1s.push(harmonic(p, r));

        let mut found = 0usize;
        let mut ap = 0.0;
        for (i, (id, _)) in list.ranking.iter().enumerate() {
            if relevant.contains(id) {
                found += 1;
                ap += found as f64 / (i + 1) as f64;
            }
        }
        aps.push(ap / relevant.len() as f64);

        let dcg: f64 = top
            .iter()
            .enumerate()
            .filter(|(_, id)| relevant.contains(**id))
            .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
            .sum();
        let ideal: f64 = (0..relevant.len().min(cutoff))
            .map(|i| 1.0 / ((i + 2) as f64).log2())
            .sum();
        ndcgs.push(if ideal > 0.0 { dcg / ideal } else { 0.0 });
    }
    let micro_p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let micro_r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let (precision, recall) = (mean(&precisions), mean(&recalls));
    EvalReport {
        precision,
        recall,
        micro_f1: harmonic(micro_p, micro_r),
        macro_f1: match macro_f1 {
            MacroF1::HarmonicOfMeans => harmonic(precision, recall),
            MacroF1::MeanOfPerQuery => mean(&f1s),
        },
        mrr: mean(&rrs),
        map: mean(&aps),
        ndcg: mean(&ndcgs),
        queries: rankings.len(),
        cutoff,
    }
}
