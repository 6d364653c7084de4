//! Constrained weighted random walks over the eventuality graph.
//!
//! Walks follow discourse edges only, with three filters on top of the plain
//! weight-proportional step:
//!
//! * start nodes need `frequency > min_start_frequency`, and their start mass is
//!   the frequency capped at a percentile and raised to a sub-linear power;
//! * a non-transitive relation may not repeat on two consecutive edges;
//! * configured relation bigrams (by default `Condition` then `Reason`) get
//!   their step mass multiplied by `pattern_boost`.

use std::collections::BTreeMap;
use std::io::{self, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{Edge, GraphError, KnowledgeGraph, NodeId, RelationType};
use crate::seeded_rng;

#[derive(Debug, Error)]
pub enum WalkError {
    #[error("invalid walk config: {0}")]
    InvalidConfig(String),
    #[error("no node satisfies the start-node filter")]
    NoEligibleStartNodes,
    #[error("sampling stalled after {failures} consecutive failed walks ({emitted} paths emitted)")]
    SamplingStalled { failures: usize, emitted: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkConfig {
    /// Start nodes need a frequency strictly greater than this.
    pub min_start_frequency: u64,
    pub min_hops: usize,
    pub max_hops: usize,
    pub transitive_relations: Vec<RelationType>,
    /// `(previous, next)` relation pairs whose step mass is multiplied by `pattern_boost`.
    pub boosted_patterns: Vec<(RelationType, RelationType)>,
    pub pattern_boost: f64,
    pub downsample_percentile: f64,
    pub downsample_power: f64,
    pub seed: u64,
    pub num_sequences: usize,
    pub max_consecutive_failures: usize,
    pub workers: usize,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            min_start_frequency: 5,
            min_hops: 1,
            max_hops: 5,
            transitive_relations: vec![
                RelationType::Precedence,
                RelationType::Succession,
                RelationType::Reason,
                RelationType::Result,
            ],
            boosted_patterns: vec![(RelationType::Condition, RelationType::Reason)],
            pattern_boost: 2.0,
            downsample_percentile: 0.999,
            downsample_power: 0.5,
            seed: 0,
            num_sequences: 1000,
            max_consecutive_failures: 100,
            workers: 1,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<(), WalkError> {
        let bad = |m: &str| Err(WalkError::InvalidConfig(m.to_string()));
        if self.min_hops < 1 || self.min_hops > self.max_hops {
            return bad("need 1 <= min_hops <= max_hops");
        }
        if !(self.pattern_boost.is_finite() && self.pattern_boost >= 1.0) {
            return bad("pattern_boost must be >= 1");
        }
        if !(self.downsample_percentile > 0.0 && self.downsample_percentile <= 1.0) {
            return bad("downsample_percentile must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.downsample_power) {
            return bad("downsample_power must lie in [0, 1]");
        }
        if self.num_sequences == 0 {
            return bad("num_sequences must be at least 1");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.transitive_relations.contains(&RelationType::CoOccurrence)
            || self
                .boosted_patterns
                .iter()
                .any(|(a, b)| !a.is_discourse() || !b.is_discourse())
        {
            return bad("CoOccurrence cannot take part in walks");
        }
        Ok(())
    }

    pub fn is_transitive(&self, relation: RelationType) -> bool {
        self.transitive_relations.contains(&relation)
    }
}

/// Alternating node/relation chain `(E0, r0, E1, ..., r_{l-1}, E_l)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventualityPath {
    pub nodes: Vec<NodeId>,
    pub relations: Vec<RelationType>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathViolation {
    #[error("{nodes} nodes for {relations} relations")]
    Shape { nodes: usize, relations: usize },
    #[error("{0} hops is outside the configured range")]
    HopCount(usize),
    #[error("CoOccurrence at hop {0}")]
    CoOccurrence(usize),
    #[error("non-transitive {relation} repeated at hops {hop} and {}", hop + 1)]
    Repeated { hop: usize, relation: RelationType },
}

impl EventualityPath {
    pub fn hops(&self) -> usize {
        self.relations.len()
    }

    pub fn check(&self, config: &WalkConfig) -> Result<(), PathViolation> {
        if self.nodes.len() != self.relations.len() + 1 {
            return Err(PathViolation::Shape {
                nodes: self.nodes.len(),
                relations: self.relations.len(),
            });
        }
        let hops = self.hops();
        if hops < config.min_hops.max(1) || hops > config.max_hops {
            return Err(PathViolation::HopCount(hops));
        }
        if let Some(i) = self.relations.iter().position(|r| !r.is_discourse()) {
            return Err(PathViolation::CoOccurrence(i));
        }
        for (hop, w) in self.relations.windows(2).enumerate() {
            if w[0] == w[1] && !config.is_transitive(w[0]) {
                return Err(PathViolation::Repeated { hop, relation: w[0] });
            }
        }
        Ok(())
    }
}

/// Weighted categorical distribution over eligible start nodes.
#[derive(Debug, Clone)]
pub struct StartSampler {
    nodes: Vec<NodeId>,
    masses: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl StartSampler {
    pub fn new(graph: &KnowledgeGraph, config: &WalkConfig) -> Result<Self, WalkError> {
        if graph.num_nodes() == 0 {
            return Err(WalkError::NoEligibleStartNodes);
        }
        let cap = graph.frequency_percentile(config.downsample_percentile)?;
        let mut nodes = Vec::new();
        let mut masses = Vec::new();
        for node in graph.nodes() {
            if node.frequency > config.min_start_frequency && graph.has_discourse_out_edge(node.id) {
                nodes.push(node.id);
                masses.push((node.frequency.min(cap) as f64).powf(config.downsample_power));
            }
        }
        if nodes.is_empty() {
            return Err(WalkError::NoEligibleStartNodes);
        }
        let index = WeightedIndex::new(&masses).map_err(|_| WalkError::NoEligibleStartNodes)?;
        Ok(StartSampler { nodes, masses, index })
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    /// Unnormalized start masses, parallel to [`StartSampler::nodes`].
    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> NodeId {
        self.nodes[self.index.sample(rng)]
    }
}

/// Step mass of `edge` given the relation used to arrive at its head.
pub fn step_mass(edge: &Edge, previous: Option<RelationType>, config: &WalkConfig) -> f64 {
    match previous {
        Some(p) if config.boosted_patterns.contains(&(p, edge.relation)) => edge.weight * config.pattern_boost,
        _ => edge.weight,
    }
}

pub fn is_candidate(edge: &Edge, previous: Option<RelationType>, config: &WalkConfig) -> bool {
    edge.relation.is_discourse()
        && match previous {
            Some(p) => edge.relation != p || config.is_transitive(p),
            None => true,
        }
}

/// Draws the next edge out of `current`, or `None` at a dead end.
pub fn next_edge<R: Rng + ?Sized>(
    graph: &KnowledgeGraph,
    current: NodeId,
    previous: Option<RelationType>,
    rng: &mut R,
    config: &WalkConfig,
) -> Result<Option<Edge>, GraphError> {
    let edges = graph.out_edges(current)?;
    let total: f64 = edges
        .iter()
        .filter(|e| is_candidate(e, previous, config))
        .map(|e| step_mass(e, previous, config))
        .sum();
    if total <= 0.0 {
        return Ok(None);
    }
    let mut target = rng.gen::<f64>() * total;
    let mut last = None;
    for e in edges.iter().filter(|e| is_candidate(e, previous, config)) {
        let mass = step_mass(e, previous, config);
        if target < mass {
            return Ok(Some(*e));
        }
        target -= mass;
        last = Some(*e);
    }
    // rounding left a sliver past the final candidate
    Ok(last)
}

/// Per-hop-count tally of an emitted corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LengthHistogram {
    counts: Vec<usize>,
}

impl LengthHistogram {
    pub fn new(max_hops: usize) -> Self {
        LengthHistogram {
            counts: vec![0; max_hops],
        }
    }

    pub fn record(&mut self, hops: usize) {
        if hops > self.counts.len() {
            self.counts.resize(hops, 0);
        }
        self.counts[hops - 1] += 1;
    }

    pub fn count(&self, hops: usize) -> usize {
        hops.checked_sub(1)
            .and_then(|i| self.counts.get(i))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn max_hops(&self) -> usize {
        self.counts.len()
    }

    pub fn to_map(&self) -> BTreeMap<usize, usize> {
        (1..=self.counts.len()).map(|h| (h, self.count(h))).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_map()).expect("map of integers serializes")
    }
}

impl std::fmt::Display for LengthHistogram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let total = self.total().max(1);
        for h in 1..=self.counts.len() {
            let c = self.count(h);
            let bar = "#".repeat((40 * c).div_ceil(total));
            writeln!(f, "{h:>2} hops {c:>9} {bar}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub paths: Vec<EventualityPath>,
    pub histogram: LengthHistogram,
}

impl Corpus {
    pub fn write_jsonl<W: Write>(&self, out: W) -> io::Result<()> {
        crate::jsonl::write_all(out, &self.paths)
    }
}

pub struct WalkSampler<'g> {
    graph: &'g KnowledgeGraph,
    config: WalkConfig,
    starts: StartSampler,
}

impl<'g> WalkSampler<'g> {
    pub fn new(graph: &'g KnowledgeGraph, config: WalkConfig) -> Result<Self, WalkError> {
        config.validate()?;
        let starts = StartSampler::new(graph, &config)?;
        Ok(WalkSampler { graph, config, starts })
    }

    pub fn config(&self) -> &WalkConfig {
        &self.config
    }

    pub fn start_sampler(&self) -> &StartSampler {
        &self.starts
    }

    pub fn next_edge<R: Rng + ?Sized>(
        &self,
        current: NodeId,
        previous: Option<RelationType>,
        rng: &mut R,
    ) -> Result<Option<Edge>, GraphError> {
        next_edge(self.graph, current, previous, rng, &self.config)
    }

    /// One walk: draw a start node and a target hop count, then step until the
    /// target or a dead end. Walks shorter than `min_hops` yield `None`.
    pub fn sample_path<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Option<EventualityPath>, GraphError> {
        let start = self.starts.sample(rng);
        let target = rng.gen_range(self.config.min_hops..=self.config.max_hops);
        let mut nodes = vec![start];
        let mut relations = Vec::with_capacity(target);
        let mut current = start;
        while relations.len() < target {
            match self.next_edge(current, relations.last().copied(), rng)? {
                Some(e) => {
                    relations.push(e.relation);
                    nodes.push(e.tail);
                    current = e.tail;
                }
                None => break,
            }
        }
        if relations.len() < self.config.min_hops {
            return Ok(None);
        }
        Ok(Some(EventualityPath { nodes, relations }))
    }

    fn sample_quota(&self, worker: usize, quota: usize) -> Result<Vec<EventualityPath>, WalkError> {
        let mut rng = worker_rng(self.config.seed, worker);
        let mut out = Vec::with_capacity(quota);
        let mut failures = 0;
        while out.len() < quota {
            match self.sample_path(&mut rng)? {
                Some(p) => {
                    failures = 0;
                    out.push(p);
                }
                None => {
                    failures += 1;
                    if failures >= self.config.max_consecutive_failures {
                        return Err(WalkError::SamplingStalled {
                            failures,
                            emitted: out.len(),
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Emits exactly `num_sequences` paths. Worker `w` draws from its own
    /// stream and supplies paths `w, w + W, w + 2W, ...` of the output, so the
    /// corpus does not depend on thread scheduling.
    pub fn sample_corpus(&self) -> Result<Corpus, WalkError> {
        let n = self.config.num_sequences;
        let workers = self.config.workers.min(n);
        let quota = |w: usize| n / workers + usize::from(w < n % workers);
        let per_worker: Vec<Vec<EventualityPath>> = if workers == 1 {
            vec![self.sample_quota(0, n)?]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| s.spawn(move || self.sample_quota(w, quota(w))))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("walk worker panicked"))
                    .collect::<Result<Vec<_>, _>>()
            })?
        };
        let mut iters: Vec<_> = per_worker.into_iter().map(Vec::into_iter).collect();
        let mut paths = Vec::with_capacity(n);
        let mut histogram = LengthHistogram::new(self.config.max_hops);
        for i in 0..n {
            let p = iters[i % workers].next().expect("quota matches round robin");
            histogram.record(p.hops());
            paths.push(p);
        }
        Ok(Corpus { paths, histogram })
    }
}

fn worker_rng(seed: u64, worker: usize) -> ChaCha8Rng {
    let mut rng = seeded_rng(seed);
    rng.set_stream(worker as u64);
    rng
}
