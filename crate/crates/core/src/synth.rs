//! Synthetic eventuality graph with a planted, recoverable relation structure.
//!
//! Every node belongs to a *group*, named by its verb, and a *topic*, named by
//! its subject. Each discourse relation has its own nonzero group offset, so
//! an edge from group `g` under relation `r` always lands in group
//! `g + offset(r) mod G`. The relation of any planted pair is therefore a
//! function of the two verbs. Nodes sharing a topic form a co-occurrence
//! clique. A seeded fraction of the discourse edges is withheld from the
//! graph for evaluation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl;
use crate::kg::{write_edge, Edge, GraphError, KnowledgeGraph, NodeId, RelationType};
use crate::lexicon::ConnectiveLexicon;
use crate::probe::ChoiceTask;
use crate::vocab::RESERVED;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic graph spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_nodes: usize,
    pub num_groups: usize,
    pub topic_size: usize,
    /// Planted discourse edges attempted per node.
    pub out_degree: usize,
    /// Target share of each discourse relation; empty means uniform.
    /// Relations left out get no edges.
    pub relation_proportions: BTreeMap<RelationType, f64>,
    pub heldout_fraction: f64,
    /// Probability that a planted discourse edge stays inside the head's
    /// topic, when the target group has a member there.
    pub topic_coherence: f64,
    /// Frequencies are log-uniform on `[1, max_frequency)`.
    pub max_frequency: u64,
    pub num_objects: usize,
    pub num_modifiers: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_nodes: 1000,
            num_groups: 16,
            topic_size: 100,
            out_degree: 10,
            relation_proportions: BTreeMap::new(),
            heldout_fraction: 0.1,
            topic_coherence: 0.8,
            max_frequency: 3000,
            num_objects: 30,
            num_modifiers: 15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.num_nodes < 10 {
            return bad(format!("num_nodes must be at least 10, got {}", self.num_nodes));
        }
        if self.num_groups <= RelationType::NUM_DISCOURSE {
            return bad(format!(
                "num_groups must exceed {} so every relation gets its own offset",
                RelationType::NUM_DISCOURSE
            ));
        }
        if self.topic_size < 2 {
            return bad("topic_size must be at least 2".into());
        }
        if self.out_degree == 0 {
            return bad("out_degree must be positive".into());
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return bad(format!("heldout_fraction {} must be in [0, 1)", self.heldout_fraction));
        }
        if !(0.0..=1.0).contains(&self.topic_coherence) {
            return bad(format!("topic_coherence {} must be in [0, 1]", self.topic_coherence));
        }
        if self.max_frequency < 2 {
            return bad("max_frequency must be at least 2".into());
        }
        if self.num_objects == 0 {
            return bad("num_objects must be positive".into());
        }
        if let Some(r) = self.relation_proportions.keys().find(|r| !r.is_discourse()) {
            return bad(format!("{r} is not a discourse relation"));
        }
        if self.relation_proportions.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("relation proportions must be nonnegative".into());
        }
        if !self.relation_proportions.is_empty() && self.relation_proportions.values().all(|&w| w == 0.0) {
            return bad("relation proportions sum to zero".into());
        }
        Ok(())
    }

    /// Normalized target share of every discourse relation.
    pub fn proportions(&self) -> [f64; RelationType::NUM_DISCOURSE] {
        let mut w = [0.0; RelationType::NUM_DISCOURSE];
        if self.relation_proportions.is_empty() {
            w.fill(1.0);
        } else {
            for (r, &x) in &self.relation_proportions {
                w[r.index()] = x;
            }
        }
        let total: f64 = w.iter().sum();
        w.map(|x| x / total)
    }

    pub fn num_topics(&self) -> usize {
        self.num_nodes.div_ceil(self.topic_size)
    }
}

/// Parses `Name=weight,Name=weight`.
pub fn parse_proportions(spec: &str) -> Result<BTreeMap<RelationType, f64>, SynthError> {
    let mut out = BTreeMap::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, w) = part
            .split_once('=')
            .ok_or_else(|| SynthError::InvalidSpec(format!("expected Name=weight, got {part:?}")))?;
        let r: RelationType = name
            .trim()
            .parse()
            .map_err(|e| SynthError::InvalidSpec(format!("{e}")))?;
        let w: f64 = w
            .trim()
            .parse()
            .map_err(|_| SynthError::InvalidSpec(format!("bad weight in {part:?}")))?;
        out.insert(r, w);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerKeyEntry {
    pub head: NodeId,
    pub tail: NodeId,
    pub relation: RelationType,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct SynthKg {
    pub graph: KnowledgeGraph,
    pub heldout: Vec<Edge>,
    pub answer_key: Vec<AnswerKeyEntry>,
    pub choice_tasks: Vec<ChoiceTask>,
    pub group_of: Vec<usize>,
    pub topic_of: Vec<usize>,
    /// Group offset of each discourse relation, by relation index.
    pub offsets: Vec<usize>,
}

pub const NODES_FILE: &str = "nodes.tsv";
pub const EDGES_FILE: &str = "edges.tsv";
pub const HELDOUT_FILE: &str = "heldout_edges.tsv";
pub const ANSWER_KEY_FILE: &str = "answer_key.jsonl";
pub const CHOICE_FILE: &str = "choice_tasks.jsonl";

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Distinct two-syllable (then three-syllable) pseudo-words, shuffled,
/// avoiding connective and reserved words.
fn word_pool<R: Rng + ?Sized>(needed: usize, lexicon: &ConnectiveLexicon, rng: &mut R) -> Vec<String> {
    let syllables: Vec<String> = CONSONANTS
        .iter()
        .flat_map(|&c| VOWELS.iter().map(move |&v| format!("{}{}", c as char, v as char)))
        .collect();
    let banned = lexicon.words();
    let mut pool: Vec<String> = Vec::new();
    for a in &syllables {
        for b in &syllables {
            pool.push(format!("{a}{b}"));
        }
    }
    if pool.len() < needed * 2 {
        let two = pool.clone();
        for w in &two {
            for s in &syllables {
                pool.push(format!("{w}{s}"));
            }
        }
    }
    pool.retain(|w| !banned.contains(w.as_str()) && !RESERVED.contains(&w.as_str()));
    pool.shuffle(rng);
    pool.truncate(needed);
    pool
}

/// Generates the graph from `config` with the default connective lexicon
/// used for choice-task contexts.
pub fn generate(config: &SynthConfig) -> Result<SynthKg, SynthError> {
    generate_with_lexicon(config, &ConnectiveLexicon::default())
}

pub fn generate_with_lexicon(config: &SynthConfig, lexicon: &ConnectiveLexicon) -> Result<SynthKg, SynthError> {
    config.validate()?;
    let mut rng = crate::seeded_rng(config.seed);
    let n = config.num_nodes;
    let g = config.num_groups;
    let topics = config.num_topics();

    let needed = g + topics + config.num_objects + config.num_modifiers;
    let words = word_pool(needed, lexicon, &mut rng);
    if words.len() < needed {
        return Err(SynthError::InvalidSpec(format!("graph needs {needed} distinct words")));
    }
    let (verbs, rest) = words.split_at(g);
    let (subjects, rest) = rest.split_at(topics);
    let (objects, modifiers) = rest.split_at(config.num_objects);

    let mut offsets: Vec<usize> = (1..g).collect();
    offsets.shuffle(&mut rng);
    offsets.truncate(RelationType::NUM_DISCOURSE);

    let mut by_group: Vec<usize> = (0..n).collect();
    by_group.shuffle(&mut rng);
    let mut group_of = vec![0; n];
    for (rank, &node) in by_group.iter().enumerate() {
        group_of[node] = rank % g;
    }
    let mut by_topic: Vec<usize> = (0..n).collect();
    by_topic.shuffle(&mut rng);
    let mut topic_of = vec![0; n];
    for (rank, &node) in by_topic.iter().enumerate() {
        topic_of[node] = rank / config.topic_size;
    }

    let ln_max = (config.max_frequency as f64).ln();
    let mut nodes_tsv = Vec::new();
    let mut texts = Vec::with_capacity(n);
    for i in 0..n {
        let mut text = vec![subjects[topic_of[i]].clone(), verbs[group_of[i]].clone()];
        if rng.gen_bool(0.8) {
            text.push(objects[rng.gen_range(0..objects.len())].clone());
        }
        if !modifiers.is_empty() && rng.gen_bool(0.3) {
            text.push(modifiers[rng.gen_range(0..modifiers.len())].clone());
        }
        let u: f64 = rng.gen();
        let freq = ((u * ln_max).exp().floor() as u64).clamp(1, config.max_frequency - 1);
        writeln!(nodes_tsv, "{i}\t{freq}\t{}", text.join(" "))?;
        texts.push(text.join(" "));
    }

    let mut members: Vec<Vec<NodeId>> = vec![Vec::new(); g];
    let mut members_by_topic: Vec<Vec<Vec<NodeId>>> = vec![vec![Vec::new(); g]; topics];
    for (i, &gr) in group_of.iter().enumerate() {
        members[gr].push(i as NodeId);
        members_by_topic[topic_of[i]][gr].push(i as NodeId);
    }
    let relation_dist = WeightedIndex::new(config.proportions()).expect("validated proportions");
    let mut pairs = HashSet::new();
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    let mut answer_key = Vec::new();
    for h in 0..n {
        for _ in 0..config.out_degree {
            let r = RelationType::from_index(relation_dist.sample(&mut rng)).expect("discourse index");
            let target_group = (group_of[h] + offsets[r.index()]) % g;
            let local = &members_by_topic[topic_of[h]][target_group];
            let target = if !local.is_empty() && rng.gen_bool(config.topic_coherence) {
                local
            } else {
                &members[target_group]
            };
            let mut placed = None;
            for _ in 0..20 {
                let t = target[rng.gen_range(0..target.len())];
                if t as usize != h && pairs.insert((h as NodeId, t)) {
                    placed = Some(t);
                    break;
                }
            }
            let Some(t) = placed else { continue };
            let edge = Edge {
                head: h as NodeId,
                tail: t,
                relation: r,
                weight: rng.gen_range(1..=10) as f64,
            };
            let split = if rng.gen_bool(config.heldout_fraction) {
                heldout.push(edge);
                Split::Heldout
            } else {
                train.push(edge);
                Split::Train
            };
            answer_key.push(AnswerKeyEntry {
                head: edge.head,
                tail: edge.tail,
                relation: r,
                split,
            });
        }
    }

    let mut edges_tsv = Vec::new();
    for e in &train {
        write_edge(&mut edges_tsv, e)?;
    }
    let mut topic_members: Vec<Vec<NodeId>> = vec![Vec::new(); topics];
    for (i, &t) in topic_of.iter().enumerate() {
        topic_members[t].push(i as NodeId);
    }
    for clique in &topic_members {
        for (a, &x) in clique.iter().enumerate() {
            for &y in &clique[a + 1..] {
                write_edge(
                    &mut edges_tsv,
                    &Edge {
                        head: x,
                        tail: y,
                        relation: RelationType::CoOccurrence,
                        weight: 1.0,
                    },
                )?;
            }
        }
    }
    let graph = KnowledgeGraph::load(&nodes_tsv[..], &edges_tsv[..])?;

    let mut choice_tasks = Vec::with_capacity(heldout.len());
    for e in &heldout {
        let excluded: BTreeSet<NodeId> = [e.head, e.tail].into();
        let mut positives: BTreeSet<NodeId> = BTreeSet::new();
        for id in [e.head, e.tail] {
            positives.extend(graph.co_occurrence_neighbors(id)?.iter().copied());
        }
        let positives: Vec<NodeId> = positives.difference(&excluded).copied().collect();
        if positives.is_empty() || positives.len() + 2 >= n {
            continue;
        }
        let pos = positives[rng.gen_range(0..positives.len())];
        let neg = loop {
            let m = rng.gen_range(0..n) as NodeId;
            if !excluded.contains(&m) && positives.binary_search(&m).is_err() {
                break m;
            }
        };
        let connective = lexicon
            .connective(e.relation)
            .map(|w| w.join(" "))
            .unwrap_or_default();
        let context = format!("{} {connective} {}", texts[e.head as usize], texts[e.tail as usize]);
        let gold = usize::from(rng.gen_bool(0.5));
        let mut candidates = vec![texts[neg as usize].clone(), texts[neg as usize].clone()];
        candidates[gold] = texts[pos as usize].clone();
        if candidates[0] == candidates[1] {
            continue;
        }
        choice_tasks.push(ChoiceTask {
            context,
            candidates,
            gold: Some(gold),
        });
    }

    Ok(SynthKg {
        graph,
        heldout,
        answer_key,
        choice_tasks,
        group_of,
        topic_of,
        offsets,
    })
}

/// Destination of each generated artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthPaths {
    pub nodes: PathBuf,
    pub edges: PathBuf,
    pub heldout: PathBuf,
    pub answer_key: PathBuf,
    pub choice_tasks: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        SynthPaths {
            nodes: dir.join(NODES_FILE),
            edges: dir.join(EDGES_FILE),
            heldout: dir.join(HELDOUT_FILE),
            answer_key: dir.join(ANSWER_KEY_FILE),
            choice_tasks: dir.join(CHOICE_FILE),
        }
    }
}

fn create(path: &Path) -> io::Result<fs::File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::File::create(path)
}

impl SynthKg {
    pub fn write(&self, paths: &SynthPaths) -> Result<(), SynthError> {
        self.graph.write_nodes(BufWriter::new(create(&paths.nodes)?))?;
        self.graph.write_edges(BufWriter::new(create(&paths.edges)?))?;
        let mut w = BufWriter::new(create(&paths.heldout)?);
        for e in &self.heldout {
            write_edge(&mut w, e)?;
        }
        w.flush()?;
        jsonl::write_all(create(&paths.answer_key)?, &self.answer_key)?;
        jsonl::write_all(create(&paths.choice_tasks)?, &self.choice_tasks)?;
        Ok(())
    }

    /// Writes the five artifact files under their default names in `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), SynthError> {
        self.write(&SynthPaths::in_dir(dir))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_gives_identical_files() {
        let cfg = SynthConfig {
            num_nodes: 100,
            seed: 3,
            ..SynthConfig::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate(&cfg).unwrap().write_to_dir(a.path()).unwrap();
        generate(&cfg).unwrap().write_to_dir(b.path()).unwrap();
        for f in [NODES_FILE, EDGES_FILE, HELDOUT_FILE, ANSWER_KEY_FILE, CHOICE_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn answer_key_covers_every_discourse_edge() {
        let kg = generate(&SynthConfig {
            num_nodes: 200,
            ..SynthConfig::default()
        })
        .unwrap();
        let key: HashSet<(NodeId, NodeId, RelationType)> =
            kg.answer_key.iter().map(|k| (k.head, k.tail, k.relation)).collect();
        for e in kg.graph.edges().iter().filter(|e| e.relation.is_discourse()) {
            assert!(key.contains(&(e.head, e.tail, e.relation)));
        }
        for e in &kg.heldout {
            assert!(key.contains(&(e.head, e.tail, e.relation)));
        }
        let train = kg.answer_key.iter().filter(|k| k.split == Split::Train).count();
        assert_eq!(train, kg.graph.edges().iter().filter(|e| e.relation.is_discourse()).count());
    }

    #[test]
    fn relation_is_a_function_of_the_verb_pair() {
        let kg = generate(&SynthConfig::default()).unwrap();
        let mut seen: BTreeMap<(usize, usize), RelationType> = BTreeMap::new();
        for k in &kg.answer_key {
            let pair = (kg.group_of[k.head as usize], kg.group_of[k.tail as usize]);
            assert_eq!(*seen.entry(pair).or_insert(k.relation), k.relation);
        }
        let distinct: BTreeSet<usize> = kg.offsets.iter().copied().collect();
        assert_eq!(distinct.len(), RelationType::NUM_DISCOURSE);
        assert!(!distinct.contains(&0));
    }

    #[test]
    fn rejects_bad_specs() {
        for cfg in [
            SynthConfig {
                num_nodes: 9,
                ..SynthConfig::default()
            },
            SynthConfig {
                num_groups: 14,
                ..SynthConfig::default()
            },
            SynthConfig {
                relation_proportions: BTreeMap::from([(RelationType::CoOccurrence, 1.0)]),
                ..SynthConfig::default()
            },
        ] {
            assert!(matches!(generate(&cfg), Err(SynthError::InvalidSpec(_))));
        }
        assert!(parse_proportions("Reason=2,Bogus=1").is_err());
        assert_eq!(
            parse_proportions("Reason=2, result=1").unwrap(),
            BTreeMap::from([(RelationType::Reason, 2.0), (RelationType::Result, 1.0)])
        );
    }

    #[test]
    fn choice_tasks_have_one_topic_match() {
        let kg = generate(&SynthConfig {
            num_nodes: 300,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(!kg.choice_tasks.is_empty());
        for t in &kg.choice_tasks {
            t.validate().unwrap();
            let ctx_topics: BTreeSet<&str> = t.context.split(' ').collect();
            let gold = t.gold.unwrap();
            let topic = |c: &str| c.split(' ').next().unwrap().to_string();
            assert!(ctx_topics.contains(topic(&t.candidates[gold]).as_str()));
        }
    }
}
