//! Contrastive training with random, in-batch and BM25 hard negatives.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bm25::Bm25Index;
use crate::corpus::{CaseGraphs, Labels};
use crate::model::{case_representation, Mode, ModelError, ModelParams, ParamVars, Similarity};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("query {0:?} is not in the candidate pool")]
    UnknownQuery(String),
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { what: &'static str, epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Random easy negatives per query.
    pub n_easy: usize,
    /// BM25 hard negatives per query.
    pub m_hard: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub similarity: Similarity,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            n_easy: 1,
            m_hard: 5,
            batch_size: 16,
            learning_rate: 5e-3,
            weight_decay: 1e-4,
            epochs: 20,
            seed: 0,
            similarity: Similarity::Dot,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(TrainError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config(
                "learning_rate and weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// `-log( e^{s+/τ} / (e^{s+/τ} + Σ e^{s_easy/τ} + Σ e^{s_hard/τ}) )` over
/// taped case vectors, evaluated as `logsumexp(s/τ) - s+/τ`.
pub fn contrastive_loss(
    tape: &mut Tape,
    query: Var,
    positive: Var,
    easy: &[Var],
    hard: &[Var],
    tau: f64,
    similarity: Similarity,
) -> Result<Var, TrainError> {
    if !(tau > 0.0) {
        return Err(TrainError::Config(format!("tau must be positive, got {tau}")));
    }
    let mut scores = Vec::with_capacity(1 + easy.len() + hard.len());
    scores.push(similarity.score_var(tape, query, positive)?);
    for &neg in easy.iter().chain(hard) {
        scores.push(similarity.score_var(tape, query, neg)?);
    }
    let logits = tape.concat(&scores)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let lse = tape.logsumexp(logits)?;
    let pos = tape.scale(scores[0], 1.0 / tau);
    Ok(tape.sub(lse, pos)?)
}

/// The same objective on precomputed similarities.
pub fn contrastive_loss_from_scores(
    positive: f64,
    easy: &[f64],
    hard: &[f64],
    tau: f64,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::scalar(1.0));
    let p = tape.constant(Tensor::scalar(positive));
    let e: Vec<Var> = easy.iter().map(|s| tape.constant(Tensor::scalar(*s))).collect();
    let h: Vec<Var> = hard.iter().map(|s| tape.constant(Tensor::scalar(*s))).collect();
    let l = contrastive_loss(&mut tape, q, p, &e, &h, tau, Similarity::Dot)?;
    Ok(tape.value(l).get(0, 0))
}

/// Highest-scoring BM25 candidates that are neither the query nor relevant.
pub fn mine_hard_negatives(
    bm25: &Bm25Index,
    query_id: &str,
    query_text: &str,
    m: usize,
    relevant: &BTreeSet<String>,
) -> Vec<String> {
    if m == 0 {
        return Vec::new();
    }
    let mut exclude = relevant.clone();
    exclude.insert(query_id.to_string());
    let found: Vec<String> = bm25
        .top_k(query_id, query_text, m, &exclude)
        .ranking
        .into_iter()
        .map(|(id, _)| id)
        .collect();
    if found.len() < m {
        log::warn!(
            "query {query_id}: only {} hard negatives available, wanted {m}",
            found.len()
        );
    }
    found
}

/// Everything a training run reads: the candidate pool with graphs, the text
/// each case is indexed under, and the training queries' labels.
pub struct TrainingSet<'a> {
    pub cases: &'a [CaseGraphs],
    pub texts: &'a [String],
    pub bm25: &'a Bm25Index,
    pub labels: &'a Labels,
}

impl TrainingSet<'_> {
    fn position(&self) -> HashMap<&str, usize> {
        self.cases
            .iter()
            .enumerate()
            .map(|(i, c)| (c.case_id.as_str(), i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub queries: usize,
    pub skipped: usize,
    pub steps: usize,
}

#[derive(Debug, Clone)]
struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.len()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    /// One Adam step with decoupled weight decay.
    fn update(&mut self, params: &mut ModelParams, grads: &[Option<Tensor>], lr: f64, wd: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let p = p.as_mut_slice();
            let zeros;
            let g = match g {
                Some(g) => g.as_slice(),
                None => {
                    zeros = vec![0.0; p.len()];
                    &zeros
                }
            };
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * p[i]);
            }
        }
    }
}

pub struct Trainer {
    params: ModelParams,
    config: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    hard_cache: Option<BTreeMap<String, Vec<String>>>,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = Adam::new(&params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            params,
            config,
            adam,
            rng,
            epoch: 0,
            hard_cache: None,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Runs every configured epoch, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        data: &TrainingSet<'_>,
        mut on_epoch: impl FnMut(&EpochStats, &ModelParams),
    ) -> Result<Vec<EpochStats>, TrainError> {
        let mut out = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            let stats = self.train_epoch(data)?;
            on_epoch(&stats, &self.params);
            out.push(stats);
        }
        Ok(out)
    }

    fn mine_all(&self, data: &TrainingSet<'_>, pos: &HashMap<&str, usize>) -> BTreeMap<String, Vec<String>> {
        data.labels
            .iter()
            .filter_map(|(q, relevant)| {
                let &i = pos.get(q.as_str())?;
                Some((
                    q.clone(),
                    mine_hard_negatives(data.bm25, q, &data.texts[i], self.config.m_hard, relevant),
                ))
            })
            .collect()
    }

    pub fn train_epoch(&mut self, data: &TrainingSet<'_>) -> Result<EpochStats, TrainError> {
        let pos = data.position();
        // BM25 scores are static, so one mining pass serves every epoch.
        if self.hard_cache.is_none() {
            self.hard_cache = Some(self.mine_all(data, &pos));
        }
        let hard = self.hard_cache.take().expect("mined above");

        let mut queries: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut skipped = 0;
        for (q, relevant) in data.labels {
            let Some(&qi) = pos.get(q.as_str()) else {
                return Err(TrainError::UnknownQuery(q.clone()));
            };
            let positives: Vec<usize> = relevant
                .iter()
                .filter_map(|id| pos.get(id.as_str()).copied())
                .filter(|&i| i != qi)
                .collect();
            if positives.is_empty() {
                log::warn!("query {q} has no positive in the pool; skipped");
                skipped += 1;
                continue;
            }
            queries.push((qi, positives));
        }
        queries.shuffle(&mut self.rng);

        let mut total = 0.0;
        let mut steps = 0;
        let mut tape = Tape::new();
        for batch in queries.chunks(self.config.batch_size) {
            let loss = self.step(&mut tape, data, batch, &hard)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "loss",
                    epoch: self.epoch,
                });
            }
            total += loss * batch.len() as f64;
            steps += 1;
        }
        if !self.params.is_finite() {
            return Err(TrainError::NonFinite {
                what: "parameters",
                epoch: self.epoch,
            });
        }
        self.hard_cache = Some(hard);
        let stats = EpochStats {
            epoch: self.epoch,
            mean_loss: if queries.is_empty() { 0.0 } else { total / queries.len() as f64 },
            queries: queries.len(),
            skipped,
            steps,
        };
        self.epoch += 1;
        Ok(stats)
    }

    fn step(
        &mut self,
        tape: &mut Tape,
        data: &TrainingSet<'_>,
        batch: &[(usize, Vec<usize>)],
        hard: &BTreeMap<String, Vec<String>>,
    ) -> Result<f64, TrainError> {
        let pos = data.position();
        tape.clear();
        let vars = self.params.register(tape, true);
        let mut reps: BTreeMap<usize, Var> = BTreeMap::new();

        let n = data.cases.len();
        let positives: Vec<usize> = batch
            .iter()
            .map(|(_, p)| *p.choose(&mut self.rng).expect("non-empty positives"))
            .collect();

        let mut losses = Vec::with_capacity(batch.len());
        for (b, (qi, _)) in batch.iter().enumerate() {
            let qid = &data.cases[*qi].case_id;
            let relevant = &data.labels[qid];
            let is_negative = |i: usize| i != *qi && !relevant.contains(&data.cases[i].case_id);

            let candidates: Vec<usize> = (0..n).filter(|&i| is_negative(i)).collect();
            let mut easy: Vec<usize> = candidates
                .choose_multiple(&mut self.rng, self.config.n_easy)
                .copied()
                .collect();
            // other queries' positives, unless they are relevant to this one
            easy.extend(
                positives
                    .iter()
                    .enumerate()
                    .filter(|(o, p)| *o != b && is_negative(**p))
                    .map(|(_, p)| *p),
            );
            let hard_idx: Vec<usize> = hard
                .get(qid)
                .map(|ids| ids.iter().filter_map(|id| pos.get(id.as_str()).copied()).collect())
                .unwrap_or_default();

            let q = self.represent(tape, &vars, data, &mut reps, *qi)?;
            let p = self.represent(tape, &vars, data, &mut reps, positives[b])?;
            let e = easy
                .iter()
                .map(|&i| self.represent(tape, &vars, data, &mut reps, i))
                .collect::<Result<Vec<_>, _>>()?;
            let h = hard_idx
                .iter()
                .map(|&i| self.represent(tape, &vars, data, &mut reps, i))
                .collect::<Result<Vec<_>, _>>()?;
            losses.push(contrastive_loss(
                tape,
                q,
                p,
                &e,
                &h,
                self.config.tau,
                self.config.similarity,
            )?);
        }
        let loss = tape.mean(&losses)?;
        let value = tape.value(loss).get(0, 0);
        tape.backward(loss)?;
        let grads: Vec<Option<Tensor>> = vars.vars().iter().map(|v| tape.grad(*v).cloned()).collect();
        self.adam.update(
            &mut self.params,
            &grads,
            self.config.learning_rate,
            self.config.weight_decay,
        );
        Ok(value)
    }

    /// Each case is encoded once per step; repeated uses share the same
    /// taped representation.
    fn represent(
        &mut self,
        tape: &mut Tape,
        vars: &ParamVars,
        data: &TrainingSet<'_>,
        reps: &mut BTreeMap<usize, Var>,
        i: usize,
    ) -> Result<Var, TrainError> {
        if let Some(v) = reps.get(&i) {
            return Ok(*v);
        }
        let v = case_representation(
            tape,
            vars,
            &self.params.config,
            &data.cases[i],
            &mut Mode::Train(&mut self.rng),
        )?;
        reps.insert(i, v);
        Ok(v)
    }
}
