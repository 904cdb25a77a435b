//! Run configuration files (TOML).
//!
//! ```toml
//! seed = 0                      # required; seeds initialisation and training
//! checkpoint_every = 5          # 0 disables intermediate checkpoints
//!
//! [paths]                       # relative to the config file
//! corpus = "corpus.jsonl"
//! labels = "train_labels.jsonl"
//! out_dir = "run"
//! test_labels = "test_labels.jsonl"   # optional: evaluate after training
//!
//! [retrieval]
//! two_stage = false
//! first_stage_k = 10
//!
//! [encoder]  # dim, normalize, seed
//! [graph]    # global_node
//! [model]    # dims, heads, readout, variant, dropout, leaky_slope
//! [train]    # tau, n_easy, m_hard, batch_size, learning_rate, weight_decay, epochs, similarity
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use casegraph_core::pipeline::ExperimentConfig;
use casegraph_core::{EncoderConfig, GraphOptions, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub labels: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalMode {
    pub two_stage: bool,
    pub first_stage_k: usize,
}

impl Default for RetrievalMode {
    fn default() -> Self {
        Self {
            two_stage: false,
            first_stage_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    pub paths: Paths,
    #[serde(default)]
    pub retrieval: RetrievalMode,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub graph: GraphOptions,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_checkpoint_every() -> usize {
    5
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.corpus, &mut cfg.paths.labels, &mut cfg.paths.out_dir] {
            *p = base.join(&*p);
        }
        if let Some(p) = &mut cfg.paths.test_labels {
            *p = base.join(&*p);
        }
        Ok(cfg)
    }

    /// The model-side settings with the run seed applied.
    pub fn experiment(&self) -> anyhow::Result<ExperimentConfig> {
        let mut model = self.model.clone();
        model.init_seed = self.seed;
        let mut train = self.train.clone();
        train.seed = self.seed;
        ExperimentConfig {
            encoder: self.encoder,
            graph: self.graph,
            model,
            train,
        }
        .normalized()
        .map_err(|e| UsageError(e.to_string()).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg: RunConfig = toml::from_str(
            "seed = 3\n[paths]\ncorpus = \"c\"\nlabels = \"l\"\nout_dir = \"o\"\n",
        )
        .unwrap();
        assert_eq!(cfg.checkpoint_every, 5);
        assert_eq!(cfg.train, TrainConfig::default());
        let exp = cfg.experiment().unwrap();
        assert_eq!(exp.train.seed, 3);
        assert_eq!(exp.model.init_seed, 3);
    }

    #[test]
    fn seed_is_required() {
        let err = toml::from_str::<RunConfig>("[paths]\ncorpus = \"c\"\nlabels = \"l\"\nout_dir = \"o\"\n")
            .unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn sections_override_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
seed = 0
[paths]
corpus = "c"
labels = "l"
out_dir = "o"
[model]
variant = "gcn"
readout = "average"
[train]
epochs = 3
tau = 0.5
"#,
        )
        .unwrap();
        assert_eq!(cfg.model.variant, casegraph_core::Variant::Gcn);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.tau, 0.5);
    }
}
