mod config;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use casegraph_core::corpus::{self, labels_to_records, read_cases, read_labels, write_jsonl};
use casegraph_core::eval::{evaluate_with, MacroF1, RankedList};
use casegraph_core::pipeline::{self, Dataset, PipelineError};
use casegraph_core::synth::{generate, SynthConfig};
use casegraph_core::train::TrainError;
use casegraph_core::{Checkpoint, HashEncoder};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// Invalid invocation or configuration; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// NaN or infinity in parameters, losses or scores; exits with status 3.
#[derive(Debug)]
struct NumericError(String);

impl fmt::Display for NumericError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericError {}

#[derive(Parser)]
#[command(name = "casegraph", version, about = "Case graph retrieval runs")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse case records and write their fact and issue graphs as JSON lines.
    BuildGraphs {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run config whose [encoder] and [graph] sections are used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train from a run config; writes checkpoints, epoch stats and a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rank the corpus for each query and write ranked lists as JSON lines.
    Retrieve {
        #[arg(long, required_unless_present = "bm25")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// JSON lines with a "query_id" field (a label file works).
        #[arg(long)]
        queries: PathBuf,
        /// Rerank BM25's top k instead of ranking the whole pool.
        #[arg(long)]
        two_stage: bool,
        /// BM25 depth with --two-stage or --bm25 (default 10); otherwise
        /// truncates the model ranking (default: full ranking).
        #[arg(long)]
        k: Option<usize>,
        /// Lexical baseline: BM25 only, no checkpoint.
        #[arg(long, conflicts_with_all = ["checkpoint", "two_stage"])]
        bm25: bool,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score ranked lists against relevance labels.
    Eval {
        #[arg(long)]
        rankings: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 5)]
        cutoff: usize,
        #[arg(long, value_enum, default_value_t = MacroMode::Harmonic)]
        macro_f1: MacroMode,
        /// Also write the report as JSON lines, one metric per line.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the cluster-structured synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 100)]
        n_cases: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        clusters: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MacroMode {
    /// Harmonic mean of macro precision and recall.
    Harmonic,
    /// Mean of per-query F1.
    PerQuery,
}

impl From<MacroMode> for MacroF1 {
    fn from(m: MacroMode) -> Self {
        match m {
            MacroMode::Harmonic => MacroF1::HarmonicOfMeans,
            MacroMode::PerQuery => MacroF1::MeanOfPerQuery,
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config_sha256: String,
    config: serde_json::Value,
    inputs: Vec<(String, String)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_digest(path: &Path) -> Result<(String, String)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok((path.display().to_string(), sha256_hex(&bytes)))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    config: &impl Serialize,
    inputs: &[&Path],
) -> Result<()> {
    let config = serde_json::to_value(config)?;
    let manifest = Manifest {
        tool: "casegraph",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        config_sha256: sha256_hex(config.to_string().as_bytes()),
        config,
        inputs: inputs.iter().map(|p| file_digest(p)).collect::<Result<_>>()?,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("input file not found: {}", path.display());
    }
    Ok(())
}

fn check_finite(rankings: &[RankedList]) -> Result<()> {
    for list in rankings {
        if let Some((id, s)) = list.ranking.iter().find(|(_, s)| !s.is_finite()) {
            return Err(NumericError(format!(
                "non-finite score {s} for candidate {id:?} of query {:?}",
                list.query_id
            ))
            .into());
        }
    }
    Ok(())
}

fn write_rankings(out: Option<&Path>, rankings: &[RankedList]) -> Result<()> {
    match out {
        Some(path) => write_jsonl(path, rankings)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            for r in rankings {
                writeln!(stdout, "{}", serde_json::to_string(r)?)?;
            }
        }
    }
    Ok(())
}

fn report_records(report: &casegraph_core::EvalReport) -> Vec<serde_json::Value> {
    let mut records: Vec<serde_json::Value> = report
        .metrics()
        .iter()
        .map(|(name, value)| serde_json::json!({"metric": name, "value": value}))
        .collect();
    records.push(serde_json::json!({"metric": "queries", "value": report.queries}));
    records
}

fn cmd_synth(n_cases: usize, seed: u64, clusters: usize, out_dir: &Path) -> Result<()> {
    if clusters == 0 || n_cases < clusters {
        return Err(UsageError(format!("need at least one case per cluster ({n_cases} cases, {clusters} clusters)")).into());
    }
    let cfg = SynthConfig {
        n_cases,
        clusters,
        seed,
        ..Default::default()
    };
    let synth = generate(&cfg);
    ensure_dir(out_dir)?;
    write_jsonl(out_dir.join("corpus.jsonl"), &synth.cases)?;
    write_jsonl(out_dir.join("train_labels.jsonl"), &labels_to_records(&synth.train_labels))?;
    write_jsonl(out_dir.join("test_labels.jsonl"), &labels_to_records(&synth.test_labels))?;
    write_manifest(out_dir, "synth", seed, &cfg, &[])?;
    log::info!(
        "wrote {} cases ({} train / {} test queries) to {}",
        synth.cases.len(),
        synth.train_labels.len(),
        synth.test_labels.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_build_graphs(corpus_path: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    require_file(corpus_path)?;
    let (encoder, options) = match config {
        Some(p) => {
            require_file(p)?;
            let cfg = RunConfig::load(p)?;
            (cfg.encoder, cfg.graph)
        }
        None => Default::default(),
    };
    let records = read_cases(corpus_path)?;
    let encoder = HashEncoder::new(encoder);
    let graphs = records
        .iter()
        .map(|r| corpus::build_case_graphs(r, &encoder, options))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_jsonl(out, &graphs)?;
    log::info!("wrote {} case graph pairs to {}", graphs.len(), out.display());
    Ok(())
}

fn cmd_train(config_path: &Path) -> Result<()> {
    require_file(config_path)?;
    let cfg = RunConfig::load(config_path)?;
    let exp = cfg.experiment()?;
    let p = &cfg.paths;
    require_file(&p.corpus)?;
    require_file(&p.labels)?;
    if let Some(t) = &p.test_labels {
        require_file(t)?;
    }
    let records = read_cases(&p.corpus)?;
    let labels = read_labels(&p.labels)?;
    let data = Dataset::build(records, &exp.encoder(), exp.graph)?;

    let out = &p.out_dir;
    ensure_dir(out)?;
    let ckpt_dir = out.join("checkpoints");
    if cfg.checkpoint_every > 0 {
        ensure_dir(&ckpt_dir)?;
    }
    let mut inputs: Vec<&Path> = vec![&p.corpus, &p.labels];
    if let Some(t) = &p.test_labels {
        inputs.push(t);
    }
    write_manifest(out, "train", cfg.seed, &cfg, &inputs)?;

    let epochs_path = out.join("epochs.jsonl");
    let mut epochs_file = fs::File::create(&epochs_path)
        .with_context(|| format!("creating {}", epochs_path.display()))?;
    let mut side_error: Option<anyhow::Error> = None;
    let (checkpoint, _) = pipeline::train(&exp, &data, &labels, |stats, params| {
        if side_error.is_some() {
            return;
        }
        log::info!("epoch {} loss {:.6}", stats.epoch, stats.mean_loss);
        let mut step = || -> Result<()> {
            writeln!(epochs_file, "{}", serde_json::to_string(stats)?)?;
            let done = stats.epoch + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                let path = ckpt_dir.join(format!("epoch-{done:04}.json"));
                exp.checkpoint(params.clone()).save(&path)?;
            }
            Ok(())
        };
        if let Err(e) = step() {
            side_error = Some(e);
        }
    })?;
    if let Some(e) = side_error {
        return Err(e);
    }
    if !checkpoint.params.is_finite() {
        return Err(NumericError("trained parameters contain non-finite values".into()).into());
    }
    checkpoint.save(out.join("checkpoint.json"))?;

    if let Some(test_path) = &p.test_labels {
        let test = read_labels(test_path)?;
        let k = cfg.retrieval.two_stage.then_some(cfg.retrieval.first_stage_k);
        let rankings = data.retrieve(&checkpoint, test.keys(), k)?;
        check_finite(&rankings)?;
        write_jsonl(out.join("rankings.jsonl"), &rankings)?;
        let report = evaluate_with(&rankings, &test, 5, MacroF1::default());
        write_jsonl(out.join("report.jsonl"), &report_records(&report))?;
        fs::write(out.join("report.txt"), format!("{report}\n"))?;
        println!("{report}");
    }
    Ok(())
}

#[derive(Deserialize)]
struct QueryRecord {
    query_id: String,
}

#[allow(clippy::too_many_arguments)]
fn cmd_retrieve(
    checkpoint: Option<&Path>,
    corpus_path: &Path,
    queries: &Path,
    two_stage: bool,
    k: Option<usize>,
    bm25: bool,
    out: Option<&Path>,
) -> Result<()> {
    if let Some(c) = checkpoint {
        require_file(c)?;
    }
    require_file(corpus_path)?;
    require_file(queries)?;
    let query_ids: Vec<String> = corpus::read_jsonl::<QueryRecord>(queries)?
        .into_iter()
        .map(|q| q.query_id)
        .collect();
    let records = read_cases(corpus_path)?;
    let rankings = if bm25 {
        let data = Dataset::build(records, &HashEncoder::new(Default::default()), Default::default())?;
        data.bm25_rankings(&query_ids, k.unwrap_or(10))?
    } else {
        let path = checkpoint.expect("clap requires --checkpoint without --bm25");
        let ck = Checkpoint::load(path)?;
        let data = Dataset::build(records, &HashEncoder::new(ck.encoder), ck.graph)?;
        if two_stage {
            data.retrieve(&ck, &query_ids, Some(k.unwrap_or(10)))?
        } else {
            let mut r = data.retrieve(&ck, &query_ids, None)?;
            if let Some(k) = k {
                r.iter_mut().for_each(|l| l.truncate(k));
            }
            r
        }
    };
    check_finite(&rankings)?;
    write_rankings(out, &rankings)
}

fn cmd_eval(
    rankings_path: &Path,
    labels_path: &Path,
    cutoff: usize,
    macro_f1: MacroF1,
    out: Option<&Path>,
) -> Result<()> {
    require_file(rankings_path)?;
    require_file(labels_path)?;
    let rankings: Vec<RankedList> = corpus::read_jsonl(rankings_path)?;
    let labels = read_labels(labels_path)?;
    if let Some(r) = rankings.iter().find(|r| !labels.contains_key(&r.query_id)) {
        bail!(
            "query {:?} in {} has no labels in {}",
            r.query_id,
            rankings_path.display(),
            labels_path.display()
        );
    }
    check_finite(&rankings)?;
    let report = evaluate_with(&rankings, &labels, cutoff, macro_f1);
    println!("{report}");
    if let Some(path) = out {
        write_jsonl(path, &report_records(&report))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildGraphs { corpus, out, config } => cmd_build_graphs(&corpus, &out, config.as_deref()),
        Command::Train { config } => cmd_train(&config),
        Command::Retrieve {
            checkpoint,
            corpus,
            queries,
            two_stage,
            k,
            bm25,
            out,
        } => cmd_retrieve(checkpoint.as_deref(), &corpus, &queries, two_stage, k, bm25, out.as_deref()),
        Command::Eval {
            rankings,
            labels,
            cutoff,
            macro_f1,
            out,
        } => cmd_eval(&rankings, &labels, cutoff, macro_f1.into(), out.as_deref()),
        Command::Synth {
            n_cases,
            seed,
            clusters,
            out_dir,
        } => cmd_synth(n_cases, seed, clusters, &out_dir),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        let train = cause.downcast_ref::<TrainError>().or(match cause.downcast_ref::<PipelineError>() {
            Some(PipelineError::Train(t)) => Some(t),
            _ => None,
        });
        if cause.is::<NumericError>() || matches!(train, Some(TrainError::NonFinite { .. })) {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
