//! Retrieval over text-attributed case graphs.
//!
//! Cases arrive as relation triplets plus section text. Each section becomes
//! a graph ([`graph`]) whose nodes and edges carry text features
//! ([`encoder`]); an edge-aware multi-head attention network ([`model`])
//! turns the fact and issue graphs into one case vector. The network is
//! trained contrastively with random, in-batch and BM25-mined hard negatives
//! ([`train`], [`bm25`]) on top of a small reverse-mode tape ([`tensor`]), and
//! rankings are scored with the usual top-5 metrics ([`eval`]).

pub mod bm25;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;

pub use bm25::{Bm25Index, Bm25Params};
pub use corpus::{CaseGraphs, CaseRecord, Labels, RelevanceLabel};
pub use encoder::{EncoderConfig, HashEncoder, TableEncoder, TextEncoder};
pub use eval::{evaluate, EvalReport, RankedList};
pub use graph::{build_graph, CaseGraph, GraphOptions, Section, Triplet};
pub use model::{Checkpoint, ModelConfig, ModelParams, Readout, Similarity, Variant};
pub use pipeline::{Dataset, ExperimentConfig};
pub use tensor::{Tape, Tensor, Var};
pub use train::{contrastive_loss, TrainConfig, Trainer};
