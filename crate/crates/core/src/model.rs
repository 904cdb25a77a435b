//! Edge-aware graph attention network over case graphs.
//!
//! One layer updates every node `v` as
//!
//! ```text
//! h'_v = W_s h_v + mean_k Σ_{u ∈ N(v)} α^k_uv (W_n^k h_u + W_e^k h_uv)
//! α^k_uv = softmax_{u ∈ N(v)} LeakyReLU(a^k · [W_n^k h_v ‖ W_n^k h_u ‖ W_e^k h_uv])
//! ```
//!
//! where `N(v)` are the sources of the messages arriving at `v`
//! ([`CaseGraph::messages`]). Edge features are the encoder outputs and are
//! reused unchanged by every layer. The GAT variant drops the edge terms and
//! the GCN variant replaces attention with symmetric degree normalisation.
//!
//! A graph is summarised either by the final vector of its virtual global
//! node or by the mean of all node vectors, and a case is the concatenation
//! of its fact and issue summaries.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CaseGraphs;
use crate::encoder::EncoderConfig;
use crate::graph::{CaseGraph, GraphOptions};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const CHECKPOINT_FORMAT: &str = "casegraph-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer {layer}: {source}")]
    Layer { layer: usize, source: TensorError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    EdgeGat,
    Gat,
    Gcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    VirtualGlobal,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Dot,
    Cosine,
}

impl Similarity {
    pub fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::Dot => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Similarity::Cosine => crate::encoder::cosine(a, b),
        }
    }

    /// Taped similarity between two equally shaped vectors.
    pub fn score_var(self, tape: &mut Tape, a: Var, b: Var) -> std::result::Result<Var, TensorError> {
        let dot = tape.dot(a, b)?;
        match self {
            Similarity::Dot => Ok(dot),
            Similarity::Cosine => {
                let aa = tape.dot(a, a)?;
                let bb = tape.dot(b, b)?;
                let prod = tape.mul(aa, bb)?;
                let eps = tape.constant(Tensor::scalar(1e-24));
                let prod = tape.add(prod, eps)?;
                let norm = tape.sqrt(prod)?;
                tape.div(dot, norm)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature widths: `dims[0]` is the encoder dim, layer `i` maps
    /// `dims[i]` to `dims[i + 1]`.
    pub dims: Vec<usize>,
    pub heads: usize,
    pub readout: Readout,
    pub variant: Variant,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dims: vec![32, 32, 32],
            heads: 2,
            readout: Readout::VirtualGlobal,
            variant: Variant::EdgeGat,
            dropout: 0.1,
            leaky_slope: 0.2,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(ModelError::Config("need at least one layer".into()));
        }
        if self.dims.contains(&0) {
            return Err(ModelError::Config("dims must be positive".into()));
        }
        if self.heads == 0 {
            return Err(ModelError::Config("heads must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(ModelError::Config(format!(
                "leaky slope {} outside (0, 1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated dims")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub node_weight: Tensor,
    /// Present for EdgeGAT only.
    pub edge_weight: Option<Tensor>,
    /// `3·d_out × 1` for EdgeGAT, `2·d_out × 1` for GAT, absent for GCN.
    pub attention: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub self_weight: Tensor,
    pub heads: Vec<HeadParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    /// Seeded uniform initialisation with bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let edge_dim = config.input_dim();
        let layers = config
            .dims
            .windows(2)
            .map(|w| {
                let (d_in, d_out) = (w[0], w[1]);
                let self_weight = Tensor::glorot(d_in, d_out, &mut rng);
                let heads = (0..config.heads)
                    .map(|_| {
                        let node_weight = Tensor::glorot(d_in, d_out, &mut rng);
                        let (edge_weight, attention) = match config.variant {
                            Variant::EdgeGat => (
                                Some(Tensor::glorot(edge_dim, d_out, &mut rng)),
                                Some(Tensor::glorot(3 * d_out, 1, &mut rng)),
                            ),
                            Variant::Gat => (None, Some(Tensor::glorot(2 * d_out, 1, &mut rng))),
                            Variant::Gcn => (None, None),
                        };
                        HeadParams {
                            node_weight,
                            edge_weight,
                            attention,
                        }
                    })
                    .collect();
                LayerParams { self_weight, heads }
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Named view of every parameter matrix, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.self"), &layer.self_weight));
            for (k, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{k}.node"), &head.node_weight));
                if let Some(t) = &head.edge_weight {
                    out.push((format!("layer{l}.head{k}.edge"), t));
                }
                if let Some(t) = &head.attention {
                    out.push((format!("layer{l}.head{k}.attention"), t));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.self_weight);
            for head in &mut layer.heads {
                out.push(&mut head.node_weight);
                if let Some(t) = &mut head.edge_weight {
                    out.push(t);
                }
                if let Some(t) = &mut head.attention {
                    out.push(t);
                }
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Records every parameter on `tape`, trainable or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let layers = self
            .layers
            .iter()
            .map(|layer| LayerVars {
                self_weight: tape.leaf(layer.self_weight.clone(), trainable),
                heads: layer
                    .heads
                    .iter()
                    .map(|h| HeadVars {
                        node_weight: tape.leaf(h.node_weight.clone(), trainable),
                        edge_weight: h.edge_weight.clone().map(|t| tape.leaf(t, trainable)),
                        attention: h.attention.clone().map(|t| tape.leaf(t, trainable)),
                    })
                    .collect(),
            })
            .collect();
        ParamVars { layers }
    }
}

#[derive(Debug, Clone)]
pub struct HeadVars {
    pub node_weight: Var,
    pub edge_weight: Option<Var>,
    pub attention: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub self_weight: Var,
    pub heads: Vec<HeadVars>,
}

/// Parameters as recorded on one tape; same order as
/// [`ModelParams::tensors_mut`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub layers: Vec<LayerVars>,
}

impl ParamVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(layer.self_weight);
            for head in &layer.heads {
                out.push(head.node_weight);
                out.extend(head.edge_weight);
                out.extend(head.attention);
            }
        }
        out
    }
}

/// Train mode carries the dropout RNG; eval mode is deterministic.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match self {
            Mode::Eval => None,
            Mode::Train(rng) => Some(&mut **rng),
        }
    }
}

/// Message-passing structure of a graph, independent of parameters.
#[derive(Debug, Clone)]
struct Structure {
    n_nodes: usize,
    src: Vec<usize>,
    dst: Vec<usize>,
    edge: Vec<usize>,
    gcn_norm: Vec<f64>,
}

impl Structure {
    fn of(graph: &CaseGraph) -> Self {
        let messages = graph.messages();
        let n_nodes = graph.nodes.len();
        let mut in_degree = vec![0usize; n_nodes];
        for m in &messages {
            in_degree[m.dst] += 1;
        }
        let deg = |i: usize| in_degree[i].max(1) as f64;
        Self {
            n_nodes,
            src: messages.iter().map(|m| m.src).collect(),
            dst: messages.iter().map(|m| m.dst).collect(),
            edge: messages.iter().map(|m| m.edge).collect(),
            gcn_norm: messages
                .iter()
                .map(|m| 1.0 / (deg(m.src) * deg(m.dst)).sqrt())
                .collect(),
        }
    }
}

/// Output of running every layer over one graph.
#[derive(Debug, Clone)]
pub struct GraphForward {
    /// `N × d_out` final node states.
    pub nodes: Var,
    /// `1 × d_out` graph summary.
    pub readout: Var,
    /// Attention coefficients per layer and head, one row per message
    /// (empty for GCN).
    pub attention: Vec<Vec<Var>>,
}

fn feature_matrix(rows: Vec<&[f64]>, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in &rows {
        data.extend_from_slice(r);
    }
    Tensor::new(rows.len(), dim, data).expect("feature rows have encoder dim")
}

fn check_graph_dim(graph: &CaseGraph, dim: usize) -> Result<()> {
    let bad = graph
        .nodes
        .iter()
        .map(|n| n.feature.len())
        .chain(graph.edges.iter().map(|e| e.feature.len()))
        .find(|len| *len != dim);
    match bad {
        Some(len) => Err(ModelError::Layer {
            layer: 0,
            source: TensorError::ShapeMismatch {
                op: "graph features",
                left: (1, len),
                right: (1, dim),
            },
        }),
        None => Ok(()),
    }
}

/// One layer update. `h` is `N × d_in`, `edges` is `E × d_edge`.
#[allow(clippy::too_many_arguments)]
fn layer_forward(
    tape: &mut Tape,
    layer: &LayerVars,
    config: &ModelConfig,
    structure: &Structure,
    h: Var,
    edges: Var,
    mode: &mut Mode<'_>,
    attention_out: &mut Vec<Var>,
) -> std::result::Result<Var, TensorError> {
    let self_term = tape.matmul(h, layer.self_weight)?;
    if structure.src.is_empty() {
        return tape.dropout(self_term, config.dropout, mode.rng());
    }
    let mut head_outputs = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let projected = tape.matmul(h, head.node_weight)?;
        let src = tape.gather_rows(projected, &structure.src)?;
        let aggregated = match config.variant {
            Variant::EdgeGat | Variant::Gat => {
                let dst = tape.gather_rows(projected, &structure.dst)?;
                let edge_term = match head.edge_weight {
                    Some(w) => {
                        let e = tape.matmul(edges, w)?;
                        Some(tape.gather_rows(e, &structure.edge)?)
                    }
                    None => None,
                };
                let mut parts = vec![dst, src];
                parts.extend(edge_term);
                let joined = tape.concat_cols(&parts)?;
                let attention = head.attention.expect("attention variant has attention vector");
                let logits = tape.matmul(joined, attention)?;
                let logits = tape.leaky_relu(logits, config.leaky_slope);
                let alpha = tape.segment_softmax(logits, &structure.dst)?;
                attention_out.push(alpha);
                let message = match edge_term {
                    Some(e) => tape.add(src, e)?,
                    None => src,
                };
                let weighted = tape.mul_rows(message, alpha)?;
                tape.scatter_add_rows(weighted, &structure.dst, structure.n_nodes)?
            }
            Variant::Gcn => {
                let norm = tape.constant(Tensor::new(
                    structure.gcn_norm.len(),
                    1,
                    structure.gcn_norm.clone(),
                )?);
                let weighted = tape.mul_rows(src, norm)?;
                tape.scatter_add_rows(weighted, &structure.dst, structure.n_nodes)?
            }
        };
        head_outputs.push(aggregated);
    }
    let averaged = tape.mean(&head_outputs)?;
    let out = tape.add(self_term, averaged)?;
    tape.dropout(out, config.dropout, mode.rng())
}

/// Runs all layers over `graph` and applies the configured readout.
///
/// A graph without a global node falls back to average readout, and an empty
/// graph reads out as the zero vector.
pub fn forward_graph(
    tape: &mut Tape,
    params: &ParamVars,
    config: &ModelConfig,
    graph: &CaseGraph,
    mode: &mut Mode<'_>,
) -> Result<GraphForward> {
    let dim = config.input_dim();
    check_graph_dim(graph, dim)?;
    let structure = Structure::of(graph);
    let x = feature_matrix(graph.nodes.iter().map(|n| n.feature.as_slice()).collect(), dim);
    let xe = feature_matrix(graph.edges.iter().map(|e| e.feature.as_slice()).collect(), dim);
    let mut h = tape.constant(x);
    let edges = tape.constant(xe);
    let mut attention = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let mut att = Vec::new();
        h = layer_forward(tape, layer, config, &structure, h, edges, mode, &mut att)
            .map_err(|source| ModelError::Layer { layer: l, source })?;
        attention.push(att);
    }
    let readout = if structure.n_nodes == 0 {
        tape.constant(Tensor::zeros(1, config.output_dim()))
    } else {
        match (config.readout, graph.global_node) {
            (Readout::VirtualGlobal, Some(g)) => tape.gather_rows(h, &[g])?,
            _ => tape.mean_rows(h)?,
        }
    };
    Ok(GraphForward {
        nodes: h,
        readout,
        attention,
    })
}

/// `readout(fact) ‖ readout(issue)` with shared parameters.
pub fn case_representation(
    tape: &mut Tape,
    params: &ParamVars,
    config: &ModelConfig,
    graphs: &CaseGraphs,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let fact = forward_graph(tape, params, config, &graphs.fact, mode)?;
    let issue = forward_graph(tape, params, config, &graphs.issue, mode)?;
    Ok(tape.concat(&[fact.readout, issue.readout])?)
}

/// Eval-mode case vector as plain numbers.
pub fn embed_case(params: &ModelParams, graphs: &CaseGraphs) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let rep = case_representation(&mut tape, &vars, &params.config, graphs, &mut Mode::Eval)?;
    Ok(tape.value(rep).as_slice().to_vec())
}

/// Eval-mode representations of many cases, computed in parallel threads.
pub fn embed_cases(params: &ModelParams, cases: &[&CaseGraphs]) -> Result<Vec<Vec<f64>>> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(cases.len().max(1));
    let chunk = cases.len().div_ceil(workers).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = cases
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|c| embed_case(params, c))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(cases.len());
        for h in handles {
            out.extend(h.join().expect("embedding worker panicked")?);
        }
        Ok(out)
    })
}

/// Everything needed to reuse a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub encoder: EncoderConfig,
    pub graph: GraphOptions,
    pub similarity: Similarity,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    model: ModelConfig,
    encoder: EncoderConfig,
    graph: GraphOptions,
    similarity: Similarity,
    tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.params.config.clone(),
            encoder: self.encoder,
            graph: self.graph,
            similarity: self.similarity,
            tensors: self
                .params
                .named_tensors()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.as_slice().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let header: Header = serde_json::from_str(text)
            .map_err(|e| ModelError::Format(format!("unreadable header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Format(format!("unknown format {:?}", header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!(
                "version {} not supported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        // Initialise the right shapes, then overwrite every tensor by name.
        let mut params = ModelParams::init(file.model)?;
        let names: Vec<(String, (usize, usize))> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        if names.len() != file.tensors.len() {
            return Err(ModelError::Format(format!(
                "expected {} tensors, found {}",
                names.len(),
                file.tensors.len()
            )));
        }
        for (slot, ((name, shape), stored)) in params
            .tensors_mut()
            .into_iter()
            .zip(names.iter().zip(file.tensors))
        {
            if &stored.name != name || (stored.rows, stored.cols) != *shape {
                return Err(ModelError::Format(format!(
                    "tensor {} {}x{} does not match expected {} {:?}",
                    stored.name, stored.rows, stored.cols, name, shape
                )));
            }
            *slot = Tensor::new(stored.rows, stored.cols, stored.data)
                .map_err(|e| ModelError::Format(e.to_string()))?;
        }
        Ok(Self {
            params,
            encoder: file.encoder,
            graph: file.graph,
            similarity: file.similarity,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
