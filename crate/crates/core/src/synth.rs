//! Cluster-structured synthetic corpus.
//!
//! Every cluster owns a pool of template triplets built from its own entity
//! and relation vocabulary mixed with shared legal vocabulary. A case draws
//! 5 to 15 templates from its cluster plus 0 to 3 noise triplets from a shared
//! pool, splits them between the fact and issue sections, and renders each
//! section as sentences padded with boilerplate. Two cases are relevant iff
//! they belong to the same cluster.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CaseRecord, Labels};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub clusters: usize,
    pub seed: u64,
    pub min_triplets: usize,
    pub max_triplets: usize,
    pub max_noise_triplets: usize,
    pub templates_per_cluster: usize,
    /// Probability that a template's head or tail comes from the shared
    /// entity pool instead of the cluster's own vocabulary.
    pub shared_entity_rate: f64,
    /// Boilerplate sentences appended to each section, inclusive range.
    pub boilerplate: (usize, usize),
    /// One in `test_every` cases is held out as an evaluation query.
    pub test_every: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cases: 100,
            clusters: 10,
            seed: 0,
            min_triplets: 5,
            max_triplets: 15,
            max_noise_triplets: 3,
            templates_per_cluster: 12,
            shared_entity_rate: 0.8,
            boilerplate: (5, 10),
            test_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub cases: Vec<CaseRecord>,
    pub cluster_of: Vec<usize>,
    pub train_labels: Labels,
    pub test_labels: Labels,
}

const SHARED_ENTITIES: [&str; 20] = [
    "applicant", "respondent", "minister", "officer", "tribunal", "board", "court", "counsel",
    "employer", "spouse", "agent", "decision", "application", "hearing", "record", "evidence",
    "panel", "claimant", "judge", "authority",
];

const SHARED_RELATIONS: [&str; 10] = [
    "is", "has", "filed", "received", "reviewed", "relied on", "submitted", "referred to",
    "considered", "noted",
];

const BOILERPLATE: [&str; 8] = [
    "The court has carefully considered the record and the submissions of the parties.",
    "For the reasons that follow the matter is determined on the standard of reasonableness.",
    "The parties were given an opportunity to make further submissions.",
    "Nothing in these reasons should be taken as a finding on any other question.",
    "The court is satisfied that the relevant principles were applied.",
    "The application is governed by the applicable statutory framework.",
    "Counsel for both parties made helpful written and oral submissions.",
    "The standard of review is not in dispute between the parties.",
];

const SYLLABLES: [&str; 24] = [
    "ba", "ce", "di", "fo", "gu", "ha", "ke", "li", "mo", "nu", "pa", "re", "si", "to", "vu",
    "za", "lan", "mer", "tor", "vin", "sal", "dor", "kel", "rin",
];

fn pseudo_word<R: Rng>(rng: &mut R, used: &mut BTreeSet<String>) -> String {
    loop {
        let n = rng.random_range(2..=3);
        let w: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
        if used.insert(w.clone()) {
            return w;
        }
    }
}

type Template = [String; 3];

struct ClusterVocab {
    templates: Vec<Template>,
}

fn cluster_vocab<R: Rng>(rng: &mut R, cfg: &SynthConfig, used: &mut BTreeSet<String>) -> ClusterVocab {
    let entities: Vec<String> = (0..6).map(|_| pseudo_word(rng, used)).collect();
    let relations: Vec<String> = (0..5).map(|_| pseudo_word(rng, used)).collect();
    let templates = (0..cfg.templates_per_cluster)
        .map(|_| {
            let entity = |rng: &mut R| {
                if rng.random_bool(cfg.shared_entity_rate) {
                    SHARED_ENTITIES.choose(rng).expect("non-empty").to_string()
                } else {
                    entities.choose(rng).expect("non-empty").clone()
                }
            };
            let head = entity(rng);
            let relation = relations.choose(rng).expect("non-empty").clone();
            let tail = entity(rng);
            [head, relation, tail]
        })
        .collect();
    ClusterVocab { templates }
}

fn capitalise(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn render(triplets: &[Template], prefix: &str, boilerplate: &[&str]) -> String {
    let mut sentences: Vec<String> = triplets
        .iter()
        .map(|[h, r, t]| format!("{prefix}{h} {r} {t}."))
        .map(|s| capitalise(&s))
        .collect();
    sentences.extend(boilerplate.iter().map(|s| s.to_string()));
    sentences.join(" ")
}

pub fn generate(cfg: &SynthConfig) -> SynthCorpus {
    assert!(cfg.clusters > 0 && cfg.n_cases >= cfg.clusters, "need at least one case per cluster");
    assert!(cfg.min_triplets <= cfg.max_triplets);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut used = BTreeSet::new();
    let vocab: Vec<ClusterVocab> = (0..cfg.clusters)
        .map(|_| cluster_vocab(&mut rng, cfg, &mut used))
        .collect();
    let noise: Vec<Template> = (0..30)
        .map(|_| {
            [
                SHARED_ENTITIES.choose(&mut rng).expect("non-empty").to_string(),
                SHARED_RELATIONS.choose(&mut rng).expect("non-empty").to_string(),
                SHARED_ENTITIES.choose(&mut rng).expect("non-empty").to_string(),
            ]
        })
        .collect();

    let mut cluster_of: Vec<usize> = (0..cfg.n_cases).map(|i| i % cfg.clusters).collect();
    cluster_of.shuffle(&mut rng);

    let width = (cfg.n_cases.max(1) - 1).to_string().len().max(3);
    let ids: Vec<String> = (0..cfg.n_cases).map(|i| format!("case{i:0width$}")).collect();

    let mut cases = Vec::with_capacity(cfg.n_cases);
    for (i, &c) in cluster_of.iter().enumerate() {
        let k = rng.random_range(cfg.min_triplets..=cfg.max_triplets);
        let mut picked: Vec<Template> = (0..k)
            .map(|_| vocab[c].templates.choose(&mut rng).expect("templates").clone())
            .collect();
        let n_noise = rng.random_range(0..=cfg.max_noise_triplets);
        picked.extend((0..n_noise).map(|_| noise.choose(&mut rng).expect("noise").clone()));
        picked.shuffle(&mut rng);
        let split = (picked.len() * 2).div_ceil(3);
        let (fact, issue) = picked.split_at(split);
        let mut section_boilerplate = || -> Vec<&str> {
            let n = rng.random_range(cfg.boilerplate.0..=cfg.boilerplate.1);
            (0..n).map(|_| *BOILERPLATE.choose(&mut rng).expect("non-empty")).collect()
        };
        let fact_bp = section_boilerplate();
        let issue_bp = section_boilerplate();
        cases.push(CaseRecord {
            case_id: ids[i].clone(),
            fact_text: render(fact, "", &fact_bp),
            issue_text: render(issue, "whether ", &issue_bp),
            fact_triplets: fact.to_vec(),
            issue_triplets: issue.to_vec(),
        });
    }

    let mut train_labels = Labels::new();
    let mut test_labels = Labels::new();
    for (i, &c) in cluster_of.iter().enumerate() {
        let relevant: BTreeSet<String> = cluster_of
            .iter()
            .enumerate()
            .filter(|&(j, &cj)| j != i && cj == c)
            .map(|(j, _)| ids[j].clone())
            .collect();
        let target = if cfg.test_every > 0 && i % cfg.test_every == cfg.test_every - 1 {
            &mut test_labels
        } else {
            &mut train_labels
        };
        target.insert(ids[i].clone(), relevant);
    }

    SynthCorpus {
        cases,
        cluster_of,
        train_labels,
        test_labels,
    }
}
