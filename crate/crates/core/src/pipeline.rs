//! Stage drivers behind the command-line tool.
//!
//! A [`PipelineConfig`] names every artifact and nests the per-stage
//! configs. It is read from TOML and patched with dotted `key=value`
//! overrides. The global seed replaces every stage seed. Each stage reads
//! its declared inputs, fails with [`PipelineError::MissingArtifact`] when
//! one is absent, and writes only its declared outputs.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::kg::{read_edge_list, GraphError, KnowledgeGraph};
use crate::lexicon::{ConnectiveLexicon, LexiconError};
use crate::masking::{build_instances, MaskConfig, MaskError, TrainingInstance};
use crate::model::gradcheck::{check_gradients, random_batch, GradCheckReport};
use crate::model::{file_digest, Encoder, LossBreakdown, ModelConfig, ModelError};
use crate::probe::{
    choice_accuracy, eval_relation_heldout, probe_connective, probe_full_vocabulary, ChoiceSummary, ChoiceTask,
    ProbeError, ProbeOutput, ProbeQuery, RankedToken, RelationEvalReport,
};
use crate::synth::{self, SynthConfig, SynthError, SynthPaths};
use crate::train::{self, write_trace, TrainConfig, TrainError};
use crate::verbalize::{path_words, VerbalizeError};
use crate::vocab::{VocabError, Vocabulary};
use crate::walk::{EventualityPath, LengthHistogram, WalkConfig, WalkError, WalkSampler};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: missing input {}", path.display())]
    MissingArtifact { stage: &'static str, path: PathBuf },
    #[error("gradient check failed: max relative error {max_rel_error:.3e} (tolerance {tolerance:.0e}), {tensors_checked}/{tensors_total} tensors covered")]
    GradCheckFailed {
        max_rel_error: f64,
        tolerance: f64,
        tensors_checked: usize,
        tensors_total: usize,
    },
    #[error("{path}: {source}")]
    Jsonl {
        path: PathBuf,
        #[source]
        source: JsonlError,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Walk(#[from] WalkError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Verbalize(#[from] VerbalizeError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// 1 for usage and config errors, 2 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Artifact locations. Relative paths resolve against `root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub root: PathBuf,
    pub nodes: PathBuf,
    pub edges: PathBuf,
    pub heldout: PathBuf,
    pub answer_key: PathBuf,
    pub choice_tasks: PathBuf,
    pub lexicon: Option<PathBuf>,
    pub graph_summary: PathBuf,
    pub corpus: PathBuf,
    pub histogram: PathBuf,
    pub vocab: PathBuf,
    pub sequences: PathBuf,
    pub instances: PathBuf,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub probe_queries: PathBuf,
    pub probe_output: PathBuf,
    pub eval_report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            root: PathBuf::from("."),
            nodes: synth::NODES_FILE.into(),
            edges: synth::EDGES_FILE.into(),
            heldout: synth::HELDOUT_FILE.into(),
            answer_key: synth::ANSWER_KEY_FILE.into(),
            choice_tasks: synth::CHOICE_FILE.into(),
            lexicon: None,
            graph_summary: "graph_summary.json".into(),
            corpus: "corpus.jsonl".into(),
            histogram: "length_histogram.json".into(),
            vocab: "vocab.txt".into(),
            sequences: "sequences.txt".into(),
            instances: "instances.jsonl".into(),
            checkpoint: "model.ckpt".into(),
            trace: "trace.csv".into(),
            probe_queries: "probe_queries.jsonl".into(),
            probe_output: "probe_output.jsonl".into(),
            eval_report: "eval_report.json".into(),
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn synth(&self) -> SynthPaths {
        SynthPaths {
            nodes: self.resolve(&self.nodes),
            edges: self.resolve(&self.edges),
            heldout: self.resolve(&self.heldout),
            answer_key: self.resolve(&self.answer_key),
            choice_tasks: self.resolve(&self.choice_tasks),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    /// Also rank the whole vocabulary at a single `[MASK]`.
    pub full_vocabulary: bool,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings { full_vocabulary: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSettings {
    pub num_coords: usize,
    pub batch_size: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Vocabulary of the random model; the trained vocabulary is not needed.
    pub vocab_size: usize,
    /// Initialization scale of the checked model, larger than the training
    /// default so gradients sit well above rounding noise.
    pub init_std: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            num_coords: 200,
            batch_size: 3,
            step: 1e-4,
            tolerance: 1e-4,
            vocab_size: 60,
            init_std: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub vocab_min_count: usize,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub walk: WalkConfig,
    pub mask: MaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeSettings,
    pub gradcheck: GradCheckSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            vocab_min_count: 1,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            walk: WalkConfig::default(),
            mask: MaskConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeSettings::default(),
            gradcheck: GradCheckSettings::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(e.to_string())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key {key:?}")));
    }
    let (last, prefix) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in prefix {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    /// Reads an optional TOML file, applies overrides, propagates the seed
    /// and validates every stage config.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: PipelineConfig = toml::Value::Table(table).try_into().map_err(config_err)?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copies the global seed into every stage.
    pub fn resolved(mut self) -> Self {
        self.synth.seed = self.seed;
        self.walk.seed = self.seed;
        self.mask.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate().map_err(config_err)?;
        self.walk.validate().map_err(config_err)?;
        self.mask.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        ModelConfig {
            vocab_size: self.model.vocab_size.max(1),
            ..self.model.clone()
        }
        .validate()
        .map_err(config_err)?;
        let g = &self.gradcheck;
        if g.batch_size == 0 || !(g.step > 0.0) || !(g.tolerance > 0.0) || g.vocab_size <= 5 || !(g.init_std > 0.0) {
            return Err(config_err("gradcheck settings must be positive and vocab_size above the reserved ids"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("<unserializable config: {e}>"))
    }
}

fn require(stage: &'static str, path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifact { stage, path })
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path)?;
    jsonl::read_all(BufReader::new(f)).map_err(|source| PipelineError::Jsonl {
        path: path.to_path_buf(),
        source,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    jsonl::write_all(create(path)?, items)?;
    Ok(())
}

fn load_graph(stage: &'static str, cfg: &PipelineConfig) -> Result<KnowledgeGraph> {
    let nodes = require(stage, cfg.paths.resolve(&cfg.paths.nodes))?;
    let edges = require(stage, cfg.paths.resolve(&cfg.paths.edges))?;
    Ok(KnowledgeGraph::load(
        BufReader::new(fs::File::open(nodes)?),
        BufReader::new(fs::File::open(edges)?),
    )?)
}

fn load_lexicon(stage: &'static str, cfg: &PipelineConfig) -> Result<ConnectiveLexicon> {
    match &cfg.paths.lexicon {
        Some(p) => {
            let p = require(stage, cfg.paths.resolve(p))?;
            Ok(ConnectiveLexicon::with_overrides(fs::File::open(p)?)?)
        }
        None => Ok(ConnectiveLexicon::default()),
    }
}

fn load_vocab(stage: &'static str, cfg: &PipelineConfig) -> Result<Vocabulary> {
    let p = require(stage, cfg.paths.resolve(&cfg.paths.vocab))?;
    Ok(Vocabulary::read(BufReader::new(fs::File::open(p)?))?)
}

fn load_encoder(stage: &'static str, cfg: &PipelineConfig) -> Result<Encoder<f32>> {
    let p = require(stage, cfg.paths.resolve(&cfg.paths.checkpoint))?;
    Ok(Encoder::load(&p)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub nodes: usize,
    pub train_edges: usize,
    pub heldout_edges: usize,
    pub choice_tasks: usize,
}

pub fn run_synth(cfg: &PipelineConfig) -> Result<SynthSummary> {
    let kg = synth::generate(&cfg.synth)?;
    kg.write(&cfg.paths.synth())?;
    let summary = SynthSummary {
        nodes: kg.graph.num_nodes(),
        train_edges: kg.graph.num_edges(),
        heldout_edges: kg.heldout.len(),
        choice_tasks: kg.choice_tasks.len(),
    };
    log::info!(
        "synth-kg: {} nodes, {} edges, {} held out, {} choice tasks",
        summary.nodes,
        summary.train_edges,
        summary.heldout_edges,
        summary.choice_tasks
    );
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub nodes: usize,
    pub edges: usize,
    pub edges_by_relation: std::collections::BTreeMap<String, usize>,
    pub eligible_start_nodes: usize,
    pub heldout_edges: Option<usize>,
}

/// Loads and validates the graph and writes a summary.
pub fn run_ingest(cfg: &PipelineConfig) -> Result<GraphSummary> {
    let graph = load_graph("ingest", cfg)?;
    let mut edges_by_relation = std::collections::BTreeMap::new();
    for e in graph.edges() {
        *edges_by_relation.entry(e.relation.to_string()).or_insert(0) += 1;
    }
    let eligible_start_nodes = graph
        .nodes()
        .iter()
        .filter(|n| n.frequency > cfg.walk.min_start_frequency && graph.has_discourse_out_edge(n.id))
        .count();
    let heldout_path = cfg.paths.resolve(&cfg.paths.heldout);
    let heldout_edges = if heldout_path.exists() {
        Some(read_edge_list(BufReader::new(fs::File::open(&heldout_path)?), graph.num_nodes())?.len())
    } else {
        None
    };
    let summary = GraphSummary {
        nodes: graph.num_nodes(),
        edges: graph.num_edges(),
        edges_by_relation,
        eligible_start_nodes,
        heldout_edges,
    };
    let mut w = create(&cfg.paths.resolve(&cfg.paths.graph_summary))?;
    serde_json::to_writer_pretty(&mut w, &summary)?;
    w.write_all(b"\n")?;
    w.flush()?;
    log::info!(
        "ingest: {} nodes, {} edges, {} eligible start nodes",
        summary.nodes,
        summary.edges,
        summary.eligible_start_nodes
    );
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct SampleSummary {
    pub paths: usize,
    pub histogram: LengthHistogram,
    pub vocab_size: usize,
}

/// Samples the walk corpus and builds the vocabulary from it.
pub fn run_sample(cfg: &PipelineConfig) -> Result<SampleSummary> {
    let graph = load_graph("sample", cfg)?;
    let lexicon = load_lexicon("sample", cfg)?;
    let corpus = WalkSampler::new(&graph, cfg.walk.clone())?.sample_corpus()?;
    corpus.write_jsonl(create(&cfg.paths.resolve(&cfg.paths.corpus))?)?;
    let vocab = Vocabulary::build(&corpus.paths, &graph, &lexicon, cfg.vocab_min_count)?;
    let mut w = create(&cfg.paths.resolve(&cfg.paths.vocab))?;
    vocab.write(&mut w)?;
    w.flush()?;
    let mut w = create(&cfg.paths.resolve(&cfg.paths.histogram))?;
    writeln!(w, "{}", corpus.histogram.to_json())?;
    w.flush()?;
    log::info!("sample: {} paths, vocabulary of {}", corpus.paths.len(), vocab.len());
    log::info!("path length histogram\n{}", corpus.histogram);
    Ok(SampleSummary {
        paths: corpus.paths.len(),
        histogram: corpus.histogram,
        vocab_size: vocab.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub instances: usize,
    pub whole_eventuality: usize,
    pub connective: usize,
    pub cooc_positive: usize,
}

/// Verbalizes and masks the corpus. The plain verbalized text of every path
/// goes to the sequences file, one line per path.
pub fn run_mask(cfg: &PipelineConfig) -> Result<MaskSummary> {
    let graph = load_graph("mask", cfg)?;
    let lexicon = load_lexicon("mask", cfg)?;
    let vocab = load_vocab("mask", cfg)?;
    let corpus_path = require("mask", cfg.paths.resolve(&cfg.paths.corpus))?;
    let corpus: Vec<EventualityPath> = read_jsonl(&corpus_path)?;
    let mut w = create(&cfg.paths.resolve(&cfg.paths.sequences))?;
    for path in &corpus {
        writeln!(w, "{}", path_words(path, &graph, &lexicon)?.join(" "))?;
    }
    w.flush()?;
    let instances = build_instances(&corpus, &graph, &lexicon, &vocab, &cfg.mask)?;
    write_jsonl(&cfg.paths.resolve(&cfg.paths.instances), &instances)?;
    let whole = instances
        .iter()
        .filter(|i| i.strategy == crate::masking::MaskStrategy::WholeEventuality)
        .count();
    let summary = MaskSummary {
        instances: instances.len(),
        whole_eventuality: whole,
        connective: instances.len() - whole,
        cooc_positive: instances.iter().filter(|i| i.cooc.as_ref().is_some_and(|c| c.label == 1)).count(),
    };
    log::info!(
        "mask: {} instances ({} whole-eventuality, {} connective, {} positive candidates)",
        summary.instances,
        summary.whole_eventuality,
        summary.connective,
        summary.cooc_positive
    );
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: Option<LossBreakdown>,
    pub checkpoint_digest: String,
}

/// Trains a single-precision encoder sized to the vocabulary, then writes
/// the final checkpoint and the loss trace.
pub fn run_train(cfg: &PipelineConfig) -> Result<TrainSummary> {
    let vocab = load_vocab("train", cfg)?;
    let instances_path = require("train", cfg.paths.resolve(&cfg.paths.instances))?;
    let instances: Vec<TrainingInstance> = read_jsonl(&instances_path)?;
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    };
    let longest = instances.iter().map(|i| i.model_input().len()).max().unwrap_or(0);
    if longest > model_cfg.max_len {
        return Err(config_err(format!(
            "longest instance has {longest} tokens but model.max_len is {}",
            model_cfg.max_len
        )));
    }
    let ckpt = cfg.paths.resolve(&cfg.paths.checkpoint);
    let ckpt_dir = ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
    fs::create_dir_all(&ckpt_dir)?;
    let outcome = train::train::<f32>(&instances, &model_cfg, &cfg.train, Some(&ckpt_dir))?;
    outcome.encoder.save(&ckpt)?;
    write_trace(&outcome.trace, create(&cfg.paths.resolve(&cfg.paths.trace))?)?;
    let summary = TrainSummary {
        steps: outcome.trace.len(),
        final_loss: outcome.trace.last().map(|r| r.loss),
        checkpoint_digest: file_digest(&ckpt)?,
    };
    log::info!(
        "train: {} steps, checkpoint {} sha256 {}",
        summary.steps,
        ckpt.display(),
        summary.checkpoint_digest
    );
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    #[serde(flatten)]
    pub output: ProbeOutput,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<RankedToken>>,
}

pub fn run_probe(cfg: &PipelineConfig) -> Result<Vec<ProbeRecord>> {
    let encoder = load_encoder("probe", cfg)?;
    let vocab = load_vocab("probe", cfg)?;
    let lexicon = load_lexicon("probe", cfg)?;
    let queries_path = require("probe", cfg.paths.resolve(&cfg.paths.probe_queries))?;
    let queries: Vec<ProbeQuery> = read_jsonl(&queries_path)?;
    let records = queries
        .iter()
        .map(|q| {
            Ok(ProbeRecord {
                output: probe_connective(&encoder, &vocab, &lexicon, q)?,
                tokens: if cfg.probe.full_vocabulary {
                    Some(probe_full_vocabulary(&encoder, &vocab, q)?)
                } else {
                    None
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&cfg.paths.resolve(&cfg.paths.probe_output), &records)?;
    log::info!("probe: {} queries answered", records.len());
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub relation: RelationEvalReport,
    pub choice: Option<ChoiceSummary>,
}

/// Held-out relation accuracy, plus choice accuracy when a choice-task file
/// exists.
pub fn run_eval(cfg: &PipelineConfig) -> Result<EvalOutput> {
    let graph = load_graph("eval", cfg)?;
    let lexicon = load_lexicon("eval", cfg)?;
    let vocab = load_vocab("eval", cfg)?;
    let encoder = load_encoder("eval", cfg)?;
    let heldout_path = require("eval", cfg.paths.resolve(&cfg.paths.heldout))?;
    let heldout = read_edge_list(BufReader::new(fs::File::open(heldout_path)?), graph.num_nodes())?;
    let relation = eval_relation_heldout(&encoder, &heldout, &graph, &lexicon, &vocab)?;
    let choice_path = cfg.paths.resolve(&cfg.paths.choice_tasks);
    let choice = if choice_path.exists() {
        let tasks: Vec<ChoiceTask> = read_jsonl(&choice_path)?;
        Some(choice_accuracy(&encoder, &vocab, &tasks)?)
    } else {
        log::warn!("eval: no choice tasks at {}", choice_path.display());
        None
    };
    let out = EvalOutput { relation, choice };
    let mut w = create(&cfg.paths.resolve(&cfg.paths.eval_report))?;
    serde_json::to_writer_pretty(&mut w, &out)?;
    w.write_all(b"\n")?;
    w.flush()?;
    log::info!(
        "eval: relation accuracy {:.4} ({}/{}), cloze accuracy {:.4}",
        out.relation.accuracy,
        out.relation.correct,
        out.relation.total,
        out.relation.cloze_accuracy
    );
    if let Some(c) = &out.choice {
        log::info!("eval: choice accuracy {:.4} ({}/{})", c.accuracy, c.correct, c.total);
    }
    Ok(out)
}

/// Finite-difference check of a freshly initialized double-precision model
/// built from the configured architecture, with dropout off.
pub fn run_gradcheck(cfg: &PipelineConfig) -> Result<GradCheckReport> {
    let g = &cfg.gradcheck;
    let model_cfg = ModelConfig {
        vocab_size: g.vocab_size,
        dropout_rate: 0.0,
        init_std: g.init_std,
        max_len: cfg.model.max_len.max(16),
        ..cfg.model.clone()
    };
    let encoder = Encoder::<f64>::new(model_cfg, cfg.seed)?;
    let mut rng = crate::seeded_rng(cfg.seed);
    let batch = random_batch(&encoder, g.batch_size, &mut rng);
    let report = check_gradients(&encoder, &batch, g.num_coords, g.step, &mut rng)?;
    log::info!(
        "gradcheck: {} coordinates over {}/{} tensors, max relative error {:.3e}",
        report.checks.len(),
        report.tensors_checked,
        report.tensors_total,
        report.max_rel_error
    );
    if let Some(w) = report.worst() {
        log::info!(
            "gradcheck: worst {}[{}] analytic {:.6e} numeric {:.6e}",
            w.tensor,
            w.index,
            w.analytic,
            w.numeric
        );
    }
    if !report.passed(g.tolerance) {
        return Err(PipelineError::GradCheckFailed {
            max_rel_error: report.max_rel_error,
            tolerance: g.tolerance,
            tensors_checked: report.tensors_checked,
            tensors_total: report.tensors_total,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = PipelineConfig::load(
            None,
            &[
                "seed=7".into(),
                "walk.num_sequences=12".into(),
                "train.max_steps=3".into(),
                "paths.root=/tmp/x".into(),
                "synth.relation_proportions.Reason=2.0".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.walk.num_sequences, 12);
        assert_eq!(cfg.train.max_steps, Some(3));
        assert_eq!(cfg.paths.root, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.synth.relation_proportions.len(), 1);
        assert_eq!(
            (cfg.synth.seed, cfg.walk.seed, cfg.mask.seed, cfg.train.seed),
            (7, 7, 7, 7)
        );
    }

    #[test]
    fn config_errors_exit_with_one() {
        for bad in ["walk.num_sequnces=3", "seed", "walk.min_hops=0", "train=3", "model.num_heads=3"] {
            let e = PipelineConfig::load(None, &[bad.to_string()]).unwrap_err();
            assert!(matches!(e, PipelineError::Config(_)), "{bad}: {e}");
            assert_eq!(e.exit_code(), 1);
        }
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "seed = 3\n[walk]\nnum_sequences = 40\nmax_hops = 3\n").unwrap();
        let cfg = PipelineConfig::load(Some(&p), &["walk.max_hops=4".into()]).unwrap();
        assert_eq!((cfg.seed, cfg.walk.num_sequences, cfg.walk.max_hops), (3, 40, 4));
        let again: PipelineConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn missing_inputs_are_stage_failures() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::load(None, &[format!("paths.root={:?}", dir.path().display().to_string())]).unwrap();
        let e = run_train(&cfg).unwrap_err();
        assert!(matches!(e, PipelineError::MissingArtifact { stage: "train", .. }), "{e}");
        assert_eq!(e.exit_code(), 2);
        assert!(matches!(run_sample(&cfg).unwrap_err(), PipelineError::MissingArtifact { .. }));
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    }

    #[test]
    fn default_gradcheck_passes() {
        let cfg = PipelineConfig::load(
            None,
            &["model.d_model=16".into(), "model.d_ff=32".into(), "model.max_len=24".into()],
        )
        .unwrap();
        let r = run_gradcheck(&cfg).unwrap();
        assert!(r.checks.len() >= 200);
    }
}
