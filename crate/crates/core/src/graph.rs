//! Text-attributed case graphs.
//!
//! A case contributes two graphs, one per [`Section`]. Entities become nodes,
//! each triplet becomes a directed relation edge from head to tail, and an
//! optional virtual global node carries the encoding of the whole section
//! text. Every entity is linked to the global node by one stored edge whose
//! feature is a copy of the entity's feature; message passing uses that edge
//! in both directions (see [`CaseGraph::messages`]).

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncodeError, TextEncoder};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("triplet {index} has an empty head or tail")]
    EmptyEntity { index: usize },
    #[error("triplet {index} is tagged {found}, expected {expected}")]
    WrongSection {
        index: usize,
        found: Section,
        expected: Section,
    },
    #[error("feature for {what} has dimension {got}, expected {expected}")]
    DimMismatch {
        what: String,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Fact,
    Issue,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Section::Fact => f.write_str("fact"),
            Section::Issue => f.write_str("issue"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub section: Section,
}

impl Triplet {
    pub fn new(head: &str, relation: &str, tail: &str, section: Section) -> Self {
        Self {
            head: head.to_string(),
            relation: relation.to_string(),
            tail: tail.to_string(),
            section,
        }
    }

    pub fn is_valid(&self) -> bool {
        !self.head.trim().is_empty() && !self.tail.trim().is_empty()
    }
}

const ARTICLES: [&str; 3] = ["the", "a", "an"];

/// Deduplication key for entity text: lowercase, whitespace collapsed, one
/// leading article removed.
pub fn entity_key(text: &str) -> String {
    let lowered = text.to_lowercase();
    let mut words: Vec<&str> = lowered.split_whitespace().collect();
    if words.len() > 1 && ARTICLES.contains(&words[0]) {
        words.remove(0);
    }
    words.join(" ")
}

fn relation_key(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub text: String,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Relation,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
    pub text: String,
    pub feature: Vec<f64>,
}

/// One directed message `src -> dst` carrying the features of edge `edge`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Message {
    pub src: usize,
    pub dst: usize,
    pub edge: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseGraph {
    pub case_id: String,
    pub section: Section,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    /// Index of the virtual global node in `nodes`; it is always the last node.
    pub global_node: Option<usize>,
}

impl CaseGraph {
    pub fn dim(&self) -> usize {
        self.nodes
            .first()
            .map(|n| n.feature.len())
            .or_else(|| self.edges.first().map(|e| e.feature.len()))
            .unwrap_or(0)
    }

    pub fn entity_count(&self) -> usize {
        self.nodes.len() - usize::from(self.global_node.is_some())
    }

    pub fn relation_edges(&self) -> impl Iterator<Item = &GraphEdge> {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Relation)
    }

    /// Directed messages used by message passing: every relation edge once
    /// (head to tail), every global edge twice (entity to global and back).
    pub fn messages(&self) -> Vec<Message> {
        let mut out = Vec::with_capacity(self.edges.len() * 2);
        for (i, e) in self.edges.iter().enumerate() {
            out.push(Message {
                src: e.src,
                dst: e.dst,
                edge: i,
            });
            if e.kind == EdgeKind::Global {
                out.push(Message {
                    src: e.dst,
                    dst: e.src,
                    edge: i,
                });
            }
        }
        out
    }

    /// Node indices adjacent (either direction) to `node`.
    pub fn neighbours(&self, node: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|e| {
                if e.src == node {
                    Some(e.dst)
                } else if e.dst == node {
                    Some(e.src)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Returns a copy whose entity nodes are reordered so that old entity `i`
    /// becomes entity `perm[i]`. The global node stays last.
    pub fn permute_entities(&self, perm: &[usize]) -> CaseGraph {
        let n = self.entity_count();
        assert_eq!(perm.len(), n, "permutation must cover every entity");
        let map = |i: usize| if i < n { perm[i] } else { i };
        let mut nodes = self.nodes.clone();
        for (old, node) in self.nodes.iter().take(n).enumerate() {
            nodes[perm[old]] = node.clone();
        }
        let edges = self
            .edges
            .iter()
            .map(|e| GraphEdge {
                src: map(e.src),
                dst: map(e.dst),
                ..e.clone()
            })
            .collect();
        CaseGraph {
            nodes,
            edges,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphOptions {
    /// Add the virtual global node; off for the "without virtual node" ablation.
    pub global_node: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self { global_node: true }
    }
}

fn check_dim(what: impl Fn() -> String, v: &[f64], expected: usize) -> Result<(), GraphError> {
    if v.len() != expected {
        return Err(GraphError::DimMismatch {
            what: what(),
            got: v.len(),
            expected,
        });
    }
    Ok(())
}

/// Builds the text-attributed graph of one section of a case.
pub fn build_graph(
    case_id: &str,
    section: Section,
    triplets: &[Triplet],
    section_text: &str,
    encoder: &dyn TextEncoder,
    options: GraphOptions,
) -> Result<CaseGraph, GraphError> {
    let dim = encoder.dim();
    let mut nodes: Vec<GraphNode> = Vec::new();
    let mut node_index: HashMap<String, usize> = HashMap::new();
    let mut edges: Vec<GraphEdge> = Vec::new();
    let mut seen_edges: HashMap<(usize, String, usize), ()> = HashMap::new();

    let mut intern = |key: String, nodes: &mut Vec<GraphNode>| -> Result<usize, GraphError> {
        if let Some(&i) = node_index.get(&key) {
            return Ok(i);
        }
        let feature = encoder.encode(&key)?;
        check_dim(|| format!("node {key:?}"), &feature, dim)?;
        nodes.push(GraphNode {
            text: key.clone(),
            feature,
        });
        node_index.insert(key, nodes.len() - 1);
        Ok(nodes.len() - 1)
    };

    for (index, t) in triplets.iter().enumerate() {
        if t.section != section {
            return Err(GraphError::WrongSection {
                index,
                found: t.section,
                expected: section,
            });
        }
        if !t.is_valid() {
            return Err(GraphError::EmptyEntity { index });
        }
        let head = intern(entity_key(&t.head), &mut nodes)?;
        let tail = intern(entity_key(&t.tail), &mut nodes)?;
        let relation = relation_key(&t.relation);
        if seen_edges
            .insert((head, relation.clone(), tail), ())
            .is_some()
        {
            continue;
        }
        let feature = encoder.encode(&relation)?;
        check_dim(|| format!("relation {relation:?}"), &feature, dim)?;
        edges.push(GraphEdge {
            src: head,
            dst: tail,
            kind: EdgeKind::Relation,
            text: relation,
            feature,
        });
    }

    let global_node = if options.global_node {
        let feature = encoder.encode_global(section_text)?;
        check_dim(|| "global node".to_string(), &feature, dim)?;
        let g = nodes.len();
        for (u, node) in nodes.iter().enumerate() {
            edges.push(GraphEdge {
                src: u,
                dst: g,
                kind: EdgeKind::Global,
                text: node.text.clone(),
                feature: node.feature.clone(),
            });
        }
        nodes.push(GraphNode {
            text: section_text.to_string(),
            feature,
        });
        Some(g)
    } else {
        None
    };

    Ok(CaseGraph {
        case_id: case_id.to_string(),
        section,
        nodes,
        edges,
        global_node,
    })
}

const VERBS: [&str; 24] = [
    "is", "are", "was", "were", "has", "have", "had", "filed", "claims", "claimed", "seeks",
    "sought", "applied", "appealed", "alleges", "alleged", "denied", "granted", "issued",
    "received", "refused", "owns", "entered", "requested",
];

/// Single-verb pattern extractor: `<subject> <verb> <object>` where the verb
/// comes from a small closed list. Sentences without such a verb, or with an
/// empty subject or object, are skipped.
pub fn extract_triplets_naive(sentences: &[&str], section: Section) -> Vec<Triplet> {
    let mut out = Vec::new();
    for sentence in sentences {
        let trimmed = sentence
            .trim()
            .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
        let words: Vec<&str> = trimmed.split_whitespace().collect();
        let Some(pos) = words
            .iter()
            .position(|w| VERBS.contains(&w.to_lowercase().as_str()))
        else {
            continue;
        };
        if pos == 0 || pos + 1 == words.len() {
            continue;
        }
        let mut head = words[..pos].join(" ");
        if let Some(first) = head.chars().next() {
            // sentence-initial capital only
            let rest = &head[first.len_utf8()..];
            head = first.to_lowercase().collect::<String>() + rest;
        }
        out.push(Triplet {
            head,
            relation: words[pos].to_lowercase(),
            tail: words[pos + 1..].join(" "),
            section,
        });
    }
    out
}

/// Naive sentence splitter on `.`, `!` and `?`.
pub fn split_sentences(text: &str) -> Vec<&str> {
    text.split_inclusive(['.', '!', '?'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, HashEncoder};
    use proptest::prelude::*;

    fn enc() -> HashEncoder {
        HashEncoder::new(EncoderConfig::default())
    }

    fn t(h: &str, r: &str, tl: &str) -> Triplet {
        Triplet::new(h, r, tl, Section::Fact)
    }

    #[test]
    fn single_triplet_graph() {
        let g = build_graph(
            "c1",
            Section::Fact,
            &[t("applicant", "is", "Canadian")],
            "The applicant is a Canadian.",
            &enc(),
            GraphOptions::default(),
        )
        .unwrap();
        assert_eq!(g.entity_count(), 2);
        assert_eq!(g.nodes.len(), 3);
        assert_eq!(g.relation_edges().count(), 1);
        assert_eq!(g.edges.iter().filter(|e| e.kind == EdgeKind::Global).count(), 2);
        assert_eq!(g.global_node, Some(2));
        let e = enc();
        assert_eq!(g.nodes[2].feature, e.encode_global("The applicant is a Canadian.").unwrap());
        for edge in g.edges.iter().filter(|e| e.kind == EdgeKind::Global) {
            assert_eq!(edge.feature, g.nodes[edge.src].feature);
            assert_eq!(edge.dst, 2);
        }
    }

    #[test]
    fn empty_triplets_leave_only_global_node() {
        let g = build_graph("c", Section::Issue, &[], "text", &enc(), GraphOptions::default())
            .unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert!(g.edges.is_empty());
        assert_eq!(g.global_node, Some(0));
    }

    #[test]
    fn shared_head_is_one_node() {
        let g = build_graph(
            "c",
            Section::Fact,
            &[t("applicant", "is", "Canadian"), t("The applicant", "filed", "an appeal")],
            "",
            &enc(),
            GraphOptions::default(),
        )
        .unwrap();
        assert_eq!(g.entity_count(), 3);
        assert_eq!(g.relation_edges().count(), 2);
        assert_eq!(g.edges.iter().filter(|e| e.kind == EdgeKind::Global).count(), 3);
    }

    #[test]
    fn duplicates_collapse_and_parallel_relations_stay() {
        let g = build_graph(
            "c",
            Section::Fact,
            &[
                t("applicant", "is", "Canadian"),
                t("Applicant", "IS", "canadian"),
                t("applicant", "was", "canadian"),
            ],
            "",
            &enc(),
            GraphOptions::default(),
        )
        .unwrap();
        assert_eq!(g.entity_count(), 2);
        assert_eq!(g.relation_edges().count(), 2);
    }

    #[test]
    fn section_and_entity_validation() {
        let err = build_graph(
            "c",
            Section::Issue,
            &[t("a b", "is", "c")],
            "",
            &enc(),
            GraphOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::WrongSection { index: 0, .. }));
        let err = build_graph(
            "c",
            Section::Fact,
            &[t("  ", "is", "c")],
            "",
            &enc(),
            GraphOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::EmptyEntity { index: 0 }));
    }

    struct Broken;
    impl TextEncoder for Broken {
        fn dim(&self) -> usize {
            4
        }
        fn encode(&self, text: &str) -> Result<Vec<f64>, EncodeError> {
            Ok(vec![0.0; if text.len() > 3 { 3 } else { 4 }])
        }
    }

    #[test]
    fn encoder_dim_mismatch_is_reported() {
        let err = build_graph(
            "c",
            Section::Fact,
            &[t("ab", "is", "longer")],
            "",
            &Broken,
            GraphOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::DimMismatch { got: 3, expected: 4, .. }));
    }

    #[test]
    fn without_global_node() {
        let g = build_graph(
            "c",
            Section::Fact,
            &[t("a x", "is", "b")],
            "text",
            &enc(),
            GraphOptions { global_node: false },
        )
        .unwrap();
        assert_eq!(g.global_node, None);
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges.len(), 1);
    }

    #[test]
    fn messages_are_reciprocal_for_global_edges() {
        let g = build_graph(
            "c",
            Section::Fact,
            &[t("applicant", "is", "Canadian")],
            "",
            &enc(),
            GraphOptions::default(),
        )
        .unwrap();
        let m = g.messages();
        assert_eq!(m.len(), 1 + 2 * 2);
        assert!(m.iter().any(|m| m.src == 2 && m.dst == 0));
        assert!(m.iter().any(|m| m.src == 0 && m.dst == 2));
    }

    #[test]
    fn entity_keys() {
        assert_eq!(entity_key("The  Applicant"), "applicant");
        assert_eq!(entity_key("a Canadian"), "canadian");
        assert_eq!(entity_key("An"), "an");
        assert_eq!(entity_key("the federal  court"), "federal court");
    }

    #[test]
    fn naive_extraction() {
        let out = extract_triplets_naive(&["The applicant is a Canadian."], Section::Fact);
        assert_eq!(out, vec![t("the applicant", "is", "a Canadian")]);
        assert_eq!(entity_key(&out[0].head), "applicant");
        assert_eq!(entity_key(&out[0].tail), "canadian");
        assert!(extract_triplets_naive(&[""], Section::Fact).is_empty());
        assert!(extract_triplets_naive(&["Nothing to see here."], Section::Fact).is_empty());
        assert!(extract_triplets_naive(&["Is it?"], Section::Fact).is_empty());
        assert!(extract_triplets_naive(&[], Section::Fact).is_empty());
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(
            split_sentences("The applicant is a Canadian. The officer refused the visa!  "),
            vec!["The applicant is a Canadian.", "The officer refused the visa!"]
        );
    }

    fn arb_triplets() -> impl Strategy<Value = Vec<Triplet>> {
        let word = prop::sample::select(vec![
            "applicant", "officer", "minister", "visa", "court", "appeal", "the applicant",
            "a visa", "tribunal",
        ]);
        let rel = prop::sample::select(vec!["is", "filed", "refused", "granted"]);
        prop::collection::vec((word.clone(), rel, word), 0..12).prop_map(|v| {
            v.into_iter()
                .map(|(h, r, tl)| Triplet::new(h, r, tl, Section::Fact))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn construction_invariants(ts in arb_triplets()) {
            let e = enc();
            let g = build_graph("c", Section::Fact, &ts, "section text", &e, GraphOptions::default()).unwrap();
            let g2 = build_graph("c", Section::Fact, &ts, "section text", &e, GraphOptions::default()).unwrap();
            prop_assert_eq!(&g, &g2);
            prop_assert!(g.nodes.len() <= 2 * ts.len() + 1);
            prop_assert!(g.edges.len() <= ts.len() + (g.nodes.len() - 1));
            let gid = g.global_node.unwrap();
            for u in 0..g.entity_count() {
                prop_assert!(g.neighbours(u).contains(&gid));
            }
            let mut texts: Vec<&str> = g.nodes[..g.entity_count()].iter().map(|n| n.text.as_str()).collect();
            let n = texts.len();
            texts.sort_unstable();
            texts.dedup();
            prop_assert_eq!(texts.len(), n);
            for edge in &g.edges {
                prop_assert!(edge.src < g.nodes.len() && edge.dst < g.nodes.len());
                prop_assert_eq!(edge.feature.len(), e.dim());
            }
            for node in &g.nodes {
                prop_assert_eq!(node.feature.len(), e.dim());
            }
        }
    }
}
