//! Line-delimited case records and relevance labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::TextEncoder;
use crate::graph::{build_graph, CaseGraph, GraphError, GraphOptions, Section, Triplet};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("duplicate case id {0:?}")]
    DuplicateId(String),
    #[error("case {case_id} ({section}): {source}")]
    Graph {
        case_id: String,
        section: Section,
        source: GraphError,
    },
}

/// One case as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub fact_text: String,
    pub issue_text: String,
    #[serde(default)]
    pub fact_triplets: Vec<[String; 3]>,
    #[serde(default)]
    pub issue_triplets: Vec<[String; 3]>,
}

impl CaseRecord {
    pub fn triplets(&self, section: Section) -> Vec<Triplet> {
        let raw = match section {
            Section::Fact => &self.fact_triplets,
            Section::Issue => &self.issue_triplets,
        };
        raw.iter()
            .map(|[h, r, t]| Triplet::new(h, r, t, section))
            .collect()
    }

    pub fn section_text(&self, section: Section) -> &str {
        match section {
            Section::Fact => &self.fact_text,
            Section::Issue => &self.issue_text,
        }
    }

    /// Fact and issue text joined; this is what lexical retrieval indexes.
    pub fn full_text(&self) -> String {
        format!("{}\n{}", self.fact_text, self.issue_text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceLabel {
    pub query_id: String,
    pub relevant_ids: Vec<String>,
}

/// Relevance judgements keyed by query id.
pub type Labels = BTreeMap<String, BTreeSet<String>>;

pub fn labels_from_records(records: &[RelevanceLabel]) -> Labels {
    records
        .iter()
        .map(|r| (r.query_id.clone(), r.relevant_ids.iter().cloned().collect()))
        .collect()
}

pub fn labels_to_records(labels: &Labels) -> Vec<RelevanceLabel> {
    labels
        .iter()
        .map(|(q, rel)| RelevanceLabel {
            query_id: q.clone(),
            relevant_ids: rel.iter().cloned().collect(),
        })
        .collect()
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, DataError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: shown.clone(),
        source,
    })?;
    parse_jsonl(BufReader::new(file), &shown)
}

pub fn parse_jsonl<T: DeserializeOwned, R: BufRead>(reader: R, name: &str) -> Result<Vec<T>, DataError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: name.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            path: name.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<(), DataError> {
    let path = path.as_ref();
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = std::io::BufWriter::new(File::create(path).map_err(io)?);
    for item in items {
        let line = serde_json::to_string(item).expect("records serialize");
        writeln!(file, "{line}").map_err(io)?;
    }
    file.flush().map_err(io)
}

pub fn read_cases(path: impl AsRef<Path>) -> Result<Vec<CaseRecord>, DataError> {
    let records: Vec<CaseRecord> = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    for r in &records {
        if !seen.insert(r.case_id.as_str()) {
            return Err(DataError::DuplicateId(r.case_id.clone()));
        }
    }
    Ok(records)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Labels, DataError> {
    let records: Vec<RelevanceLabel> = read_jsonl(path)?;
    Ok(labels_from_records(&records))
}

/// Fact and issue graphs of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseGraphs {
    pub case_id: String,
    pub fact: CaseGraph,
    pub issue: CaseGraph,
}

pub fn build_case_graphs(
    record: &CaseRecord,
    encoder: &dyn TextEncoder,
    options: GraphOptions,
) -> Result<CaseGraphs, DataError> {
    let build = |section| {
        build_graph(
            &record.case_id,
            section,
            &record.triplets(section),
            record.section_text(section),
            encoder,
            options,
        )
        .map_err(|source| DataError::Graph {
            case_id: record.case_id.clone(),
            section,
            source,
        })
    };
    Ok(CaseGraphs {
        case_id: record.case_id.clone(),
        fact: build(Section::Fact)?,
        issue: build(Section::Issue)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, HashEncoder};

    #[test]
    fn record_round_trip_and_graphs() {
        let line = r#"{"case_id":"c1","fact_text":"The applicant is a Canadian.","issue_text":"Whether the officer erred.","fact_triplets":[["applicant","is","Canadian"]],"issue_triplets":[]}"#;
        let recs: Vec<CaseRecord> = parse_jsonl(line.as_bytes(), "mem").unwrap();
        assert_eq!(recs.len(), 1);
        let g = build_case_graphs(&recs[0], &HashEncoder::new(EncoderConfig::default()), GraphOptions::default()).unwrap();
        assert_eq!(g.fact.nodes.len(), 3);
        assert_eq!(g.issue.nodes.len(), 1);
        assert!(recs[0].full_text().contains("officer"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let data = "{\"query_id\":\"q\",\"relevant_ids\":[]}\n\n{oops\n";
        let err = parse_jsonl::<RelevanceLabel, _>(data.as_bytes(), "labels.jsonl").unwrap_err();
        match err {
            DataError::Malformed { line, path, .. } => {
                assert_eq!(line, 3);
                assert_eq!(path, "labels.jsonl");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_cases("/nonexistent/cases.jsonl").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cases.jsonl"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let rec = CaseRecord {
            case_id: "x".into(),
            fact_text: String::new(),
            issue_text: String::new(),
            fact_triplets: vec![],
            issue_triplets: vec![],
        };
        write_jsonl(&p, &[rec.clone(), rec]).unwrap();
        assert!(matches!(read_cases(&p), Err(DataError::DuplicateId(_))));
    }

    #[test]
    fn labels_round_trip() {
        let recs = vec![RelevanceLabel {
            query_id: "q1".into(),
            relevant_ids: vec!["b".into(), "a".into()],
        }];
        let labels = labels_from_records(&recs);
        assert_eq!(labels["q1"].len(), 2);
        assert_eq!(labels_to_records(&labels)[0].relevant_ids, vec!["a", "b"]);
    }
}
