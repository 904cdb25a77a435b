//! Shared fixtures for the benchmarks.

use casegraph_core::synth::{generate, SynthConfig, SynthCorpus};
use casegraph_core::{Dataset, ExperimentConfig};

/// The default synthetic corpus with its graphs and BM25 index.
pub fn fixture() -> (SynthCorpus, Dataset, ExperimentConfig) {
    let corpus = generate(&SynthConfig::default());
    let config = ExperimentConfig::default()
        .normalized()
        .expect("default config is valid");
    let data = Dataset::build(corpus.cases.clone(), &config.encoder(), config.graph)
        .expect("synthetic corpus builds");
    (corpus, data, config)
}
