//! Okapi BM25 over whole-case text.
//!
//! Term weight is `idf(t) · tf / (tf + k1 · (1 - b + b · len / avg_len))`
//! with `idf(t) = ln((N - df + 0.5) / (df + 0.5) + 1)`, which is never
//! negative. Query terms are de-duplicated before summing.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::encoder::tokenize;
use crate::eval::RankedList;

#[derive(Debug, Error, PartialEq)]
pub enum Bm25Error {
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("unknown document id {0:?}")]
    UnknownDoc(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone)]
struct Doc {
    id: String,
    len: usize,
    tf: HashMap<String, u32>,
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    docs: Vec<Doc>,
    by_id: HashMap<String, usize>,
    df: HashMap<String, u32>,
    avg_doc_len: f64,
}

impl Bm25Index {
    pub fn build<I, S, T>(docs: I) -> Result<Self, Bm25Error>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        Self::with_params(docs, Bm25Params::default())
    }

    pub fn with_params<I, S, T>(docs: I, params: Bm25Params) -> Result<Self, Bm25Error>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        let mut index = Self {
            params,
            docs: Vec::new(),
            by_id: HashMap::new(),
            df: HashMap::new(),
            avg_doc_len: 0.0,
        };
        let mut total_len = 0usize;
        for (id, text) in docs {
            let id = id.into();
            if index.by_id.contains_key(&id) {
                return Err(Bm25Error::DuplicateId(id));
            }
            let tokens = tokenize(text.as_ref());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *index.df.entry(t.clone()).or_default() += 1;
            }
            total_len += tokens.len();
            index.by_id.insert(id.clone(), index.docs.len());
            index.docs.push(Doc {
                id,
                len: tokens.len(),
                tf,
            });
        }
        if !index.docs.is_empty() {
            index.avg_doc_len = total_len as f64 / index.docs.len() as f64;
        }
        Ok(index)
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn doc_freq(&self, term: &str) -> u32 {
        self.df.get(term).copied().unwrap_or(0)
    }

    pub fn term_freq(&self, doc_id: &str, term: &str) -> Result<u32, Bm25Error> {
        let doc = self.doc(doc_id)?;
        Ok(doc.tf.get(term).copied().unwrap_or(0))
    }

    pub fn doc_len(&self, doc_id: &str) -> Result<usize, Bm25Error> {
        Ok(self.doc(doc_id)?.len)
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.by_id.contains_key(doc_id)
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().map(|d| d.id.as_str())
    }

    fn doc(&self, doc_id: &str) -> Result<&Doc, Bm25Error> {
        self.by_id
            .get(doc_id)
            .map(|&i| &self.docs[i])
            .ok_or_else(|| Bm25Error::UnknownDoc(doc_id.to_string()))
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = f64::from(self.doc_freq(term));
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn query_terms(query: &str) -> Vec<String> {
        let mut seen = BTreeSet::new();
        tokenize(query)
            .into_iter()
            .filter(|t| seen.insert(t.clone()))
            .collect()
    }

    fn score_terms(&self, terms: &[(String, f64)], doc: &Doc) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let norm = k1 * (1.0 - b + b * doc.len as f64 / self.avg_doc_len);
        terms
            .iter()
            .map(|(t, idf)| match doc.tf.get(t) {
                Some(&tf) => {
                    let tf = f64::from(tf);
                    idf * tf / (tf + norm)
                }
                None => 0.0,
            })
            .sum()
    }

    fn weighted_terms(&self, query: &str) -> Vec<(String, f64)> {
        Self::query_terms(query)
            .into_iter()
            .map(|t| {
                let idf = self.idf(&t);
                (t, idf)
            })
            .collect()
    }

    pub fn score(&self, query: &str, doc_id: &str) -> Result<f64, Bm25Error> {
        let doc = self.doc(doc_id)?;
        Ok(self.score_terms(&self.weighted_terms(query), doc))
    }

    /// The `k` best documents not in `exclude`, ties broken by ascending id.
    pub fn top_k(&self, query_id: &str, query: &str, k: usize, exclude: &BTreeSet<String>) -> RankedList {
        let terms = self.weighted_terms(query);
        let scored = self
            .docs
            .iter()
            .filter(|d| !exclude.contains(&d.id))
            .map(|d| (d.id.clone(), self.score_terms(&terms, d)))
            .collect();
        let mut list = RankedList::from_scores(query_id, scored);
        list.truncate(k);
        list
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn none() -> BTreeSet<String> {
        BTreeSet::new()
    }

    #[test]
    fn empty_corpus() {
        let idx = Bm25Index::build(Vec::<(String, String)>::new()).unwrap();
        assert_eq!(idx.doc_count(), 0);
        assert!(idx.top_k("q", "cat", 3, &none()).is_empty());
    }

    #[test]
    fn term_statistics() {
        let idx = Bm25Index::build([("d", "a a b")]).unwrap();
        assert_eq!(idx.term_freq("d", "a").unwrap(), 2);
        assert_eq!(idx.term_freq("d", "b").unwrap(), 1);
        assert_eq!(idx.doc_len("d").unwrap(), 3);

        let idx = Bm25Index::build([("1", "cat dog"), ("2", "dog fish dog"), ("3", "bird")]).unwrap();
        assert_eq!(idx.doc_freq("dog"), 2);
        assert_eq!(idx.doc_freq("cat"), 1);
        assert_eq!(idx.doc_freq("bird"), 1);
        assert_eq!(idx.doc_freq("zebra"), 0);
        assert!((idx.avg_doc_len() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = Bm25Index::build([("x", "a"), ("x", "b")]).unwrap_err();
        assert_eq!(err, Bm25Error::DuplicateId("x".into()));
    }

    #[test]
    fn two_doc_hand_score() {
        let idx = Bm25Index::build([("d1", "cat sat"), ("d2", "dog ran")]).unwrap();
        // N = 2, df = 1: idf = ln(1.5/1.5 + 1) = ln 2; len = avg so denominator 1 + 1.2
        let expected = 2f64.ln() / 2.2;
        assert!((idx.score("cat", "d1").unwrap() - expected).abs() < 1e-12);
        assert!((idx.score("cat", "d1").unwrap() - 0.315_066).abs() < 1e-6);
        assert_eq!(idx.score("cat", "d2").unwrap(), 0.0);
        assert_eq!(idx.score("zebra", "d1").unwrap(), 0.0);
        assert!(matches!(idx.score("cat", "d9"), Err(Bm25Error::UnknownDoc(_))));
    }

    #[test]
    fn top_k_limits_and_tie_breaks() {
        let idx = Bm25Index::build([("b", "cat"), ("a", "cat"), ("c", "dog")]).unwrap();
        assert!(idx.top_k("q", "cat", 0, &none()).is_empty());
        let all = idx.top_k("q", "cat", 10, &none());
        assert_eq!(all.ids(), vec!["a", "b", "c"]);
        let ex: BTreeSet<String> = ["a".to_string()].into();
        assert_eq!(idx.top_k("q", "cat", 1, &ex).ids(), vec!["b"]);
    }

    #[test]
    fn score_monotone_in_tf() {
        // same length, growing tf of the query term
        let idx = Bm25Index::build([
            ("0", "x y z w"),
            ("1", "cat y z w"),
            ("2", "cat cat z w"),
            ("3", "cat cat cat w"),
        ])
        .unwrap();
        let s: Vec<f64> = ["0", "1", "2", "3"].iter().map(|d| idx.score("cat", d).unwrap()).collect();
        assert!(s.windows(2).all(|w| w[0] <= w[1]), "{s:?}");
    }
}
