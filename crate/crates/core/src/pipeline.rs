//! End-to-end glue: corpus to graphs, training, ranking and evaluation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bm25::{Bm25Error, Bm25Index};
use crate::corpus::{build_case_graphs, CaseGraphs, CaseRecord, DataError, Labels};
use crate::encoder::{EncoderConfig, HashEncoder, TextEncoder};
use crate::eval::{rank_one_stage, rank_two_stage, EmbeddedPool, RankedList};
use crate::graph::GraphOptions;
use crate::model::{embed_cases, Checkpoint, ModelConfig, ModelError, ModelParams, Readout};
use crate::train::{EpochStats, TrainConfig, TrainError, Trainer, TrainingSet};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Bm25(#[from] Bm25Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("query {0:?} is not in the corpus")]
    UnknownQuery(String),
    #[error("configuration: {0}")]
    Config(String),
}

/// Cases with their graphs and a BM25 index over their full text.
pub struct Dataset {
    pub records: Vec<CaseRecord>,
    pub graphs: Vec<CaseGraphs>,
    pub texts: Vec<String>,
    pub bm25: Bm25Index,
}

impl Dataset {
    pub fn build(
        records: Vec<CaseRecord>,
        encoder: &dyn TextEncoder,
        options: GraphOptions,
    ) -> Result<Self, PipelineError> {
        let graphs = records
            .iter()
            .map(|r| build_case_graphs(r, encoder, options))
            .collect::<Result<Vec<_>, _>>()?;
        let texts: Vec<String> = records.iter().map(CaseRecord::full_text).collect();
        let bm25 = Bm25Index::build(records.iter().map(|r| r.case_id.clone()).zip(texts.iter()))?;
        Ok(Self {
            records,
            graphs,
            texts,
            bm25,
        })
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.case_id == id)
    }

    pub fn training_set<'a>(&'a self, labels: &'a Labels) -> TrainingSet<'a> {
        TrainingSet {
            cases: &self.graphs,
            texts: &self.texts,
            bm25: &self.bm25,
            labels,
        }
    }

    pub fn embed(&self, params: &ModelParams) -> Result<EmbeddedPool, PipelineError> {
        let refs: Vec<&CaseGraphs> = self.graphs.iter().collect();
        let vectors = embed_cases(params, &refs)?;
        Ok(EmbeddedPool::new(
            self.records.iter().map(|r| r.case_id.clone()).zip(vectors),
        ))
    }

    /// Ranks the whole corpus (minus the query) for each query, or reranks
    /// BM25's top `two_stage_k` when given.
    pub fn retrieve<'q>(
        &self,
        checkpoint: &Checkpoint,
        queries: impl IntoIterator<Item = &'q String>,
        two_stage_k: Option<usize>,
    ) -> Result<Vec<RankedList>, PipelineError> {
        let pool = self.embed(&checkpoint.params)?;
        queries
            .into_iter()
            .map(|q| {
                let i = self.position(q).ok_or_else(|| PipelineError::UnknownQuery(q.clone()))?;
                let qv = pool.get(q).expect("every case embedded");
                Ok(match two_stage_k {
                    None => rank_one_stage(q, qv, &pool, checkpoint.similarity),
                    Some(k) => rank_two_stage(
                        q,
                        &self.texts[i],
                        qv,
                        &pool,
                        &self.bm25,
                        k,
                        checkpoint.similarity,
                    ),
                })
            })
            .collect()
    }

    /// The lexical baseline: BM25 over the corpus, query excluded.
    pub fn bm25_rankings<'q>(
        &self,
        queries: impl IntoIterator<Item = &'q String>,
        k: usize,
    ) -> Result<Vec<RankedList>, PipelineError> {
        queries
            .into_iter()
            .map(|q| {
                let i = self.position(q).ok_or_else(|| PipelineError::UnknownQuery(q.clone()))?;
                let exclude: BTreeSet<String> = [q.clone()].into();
                Ok(self.bm25.top_k(q, &self.texts[i], k, &exclude))
            })
            .collect()
    }
}

/// Everything that determines a training run apart from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub graph: GraphOptions,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Brings the model input width in line with the encoder and checks that
    /// the readout is meaningful for the graph options.
    pub fn normalized(mut self) -> Result<Self, PipelineError> {
        if self.model.dims.is_empty() {
            return Err(PipelineError::Config("model.dims is empty".into()));
        }
        if self.model.dims[0] != self.encoder.dim {
            return Err(PipelineError::Config(format!(
                "model.dims[0] = {} but encoder.dim = {}",
                self.model.dims[0], self.encoder.dim
            )));
        }
        if !self.graph.global_node && self.model.readout == Readout::VirtualGlobal {
            log::info!("graphs have no global node; using average readout");
            self.model.readout = Readout::Average;
        }
        Ok(self)
    }

    pub fn encoder(&self) -> HashEncoder {
        HashEncoder::new(self.encoder)
    }

    pub fn checkpoint(&self, params: ModelParams) -> Checkpoint {
        Checkpoint {
            params,
            encoder: self.encoder,
            graph: self.graph,
            similarity: self.train.similarity,
        }
    }

    pub fn initial_checkpoint(&self) -> Result<Checkpoint, PipelineError> {
        Ok(self.checkpoint(ModelParams::init(self.model.clone())?))
    }
}

/// Trains from seeded initialisation and returns the final checkpoint.
pub fn train(
    config: &ExperimentConfig,
    data: &Dataset,
    labels: &Labels,
    on_epoch: impl FnMut(&EpochStats, &ModelParams),
) -> Result<(Checkpoint, Vec<EpochStats>), PipelineError> {
    let params = ModelParams::init(config.model.clone())?;
    let mut trainer = Trainer::new(params, config.train.clone())?;
    let stats = trainer.fit(&data.training_set(labels), on_epoch)?;
    Ok((config.checkpoint(trainer.into_params()), stats))
}
