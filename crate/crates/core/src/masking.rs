//! Training instance construction: whole-eventuality masking, connective
//! masking, and the co-occurrence candidate segment.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{KnowledgeGraph, NodeId, RelationType};
use crate::lexicon::ConnectiveLexicon;
use crate::seeded_rng;
use crate::verbalize::{verbalize, EventualitySpan, TokenSequence, VerbalizeError};
use crate::vocab::{Vocabulary, CLS, MASK, NUM_RESERVED, SEP};
use crate::walk::EventualityPath;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("sequence has no eventuality spans")]
    NoEventualitySpans,
    #[error("sequence has no connective spans")]
    NoConnectiveSpans,
    #[error("no path node has a co-occurrence neighbor")]
    NoPositiveCandidate,
    #[error("every node is a path node or a co-occurrence neighbor")]
    NoNegativeCandidate,
    #[error("invalid mask config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Verbalize(#[from] VerbalizeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskStrategy {
    WholeEventuality,
    Connective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Maximum masked share of the sequence under whole-eventuality masking.
    pub budget_fraction: f64,
    /// Probability of picking whole-eventuality over connective masking.
    pub whole_eventuality_prob: f64,
    /// Inside a masked eventuality: share of positions replaced by `[MASK]`...
    pub mask_token_prob: f64,
    /// ...and by a random word; the remainder keep their token.
    pub random_token_prob: f64,
    pub cooccurrence: bool,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            budget_fraction: 0.25,
            whole_eventuality_prob: 0.5,
            mask_token_prob: 0.8,
            random_token_prob: 0.1,
            cooccurrence: true,
            seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(MaskError::InvalidConfig("budget_fraction must lie in (0, 1]".into()));
        }
        if !unit(self.whole_eventuality_prob)
            || !unit(self.mask_token_prob)
            || !unit(self.random_token_prob)
            || self.mask_token_prob + self.random_token_prob > 1.0
        {
            return Err(MaskError::InvalidConfig("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `ceil(fraction * n)`, robust to `fraction * n` landing just above an integer.
pub fn mask_budget(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoocTarget {
    pub candidate_ids: Vec<u32>,
    /// 1 when the candidate co-occurs with some path node.
    pub label: u8,
}

/// One masked sequence plus its supervision. `input_ids` is `[CLS] S [SEP]`;
/// positions in the target maps index into it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub input_ids: Vec<u32>,
    pub mlm_targets: BTreeMap<usize, u32>,
    pub relation_targets: BTreeMap<usize, RelationType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cooc: Option<CoocTarget>,
    pub strategy: MaskStrategy,
}

impl TrainingInstance {
    /// Token stream fed to the encoder: `[CLS] S [SEP]`, or
    /// `[CLS] S [SEP] E_c [SEP]` when a co-occurrence candidate is attached.
    pub fn model_input(&self) -> Vec<u32> {
        let mut ids = self.input_ids.clone();
        if let Some(c) = &self.cooc {
            ids.extend_from_slice(&c.candidate_ids);
            ids.push(SEP);
        }
        ids
    }

    /// Sequence length without `[CLS]` and `[SEP]`.
    pub fn sequence_len(&self) -> usize {
        self.input_ids.len().saturating_sub(2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoocInstance {
    pub sequence: Vec<u32>,
    pub candidate: Vec<u32>,
    pub candidate_node: NodeId,
    pub positive: bool,
}

impl CoocInstance {
    /// `[CLS] S [SEP] E_c [SEP]`
    pub fn serialize(&self) -> Vec<u32> {
        let mut ids = Vec::with_capacity(self.sequence.len() + self.candidate.len() + 3);
        ids.push(CLS);
        ids.extend_from_slice(&self.sequence);
        ids.push(SEP);
        ids.extend_from_slice(&self.candidate);
        ids.push(SEP);
        ids
    }

    pub fn target(&self) -> CoocTarget {
        CoocTarget {
            candidate_ids: self.candidate.clone(),
            label: u8::from(self.positive),
        }
    }
}

fn wrap(seq: &TokenSequence) -> Vec<u32> {
    let mut ids = Vec::with_capacity(seq.len() + 2);
    ids.push(CLS);
    ids.extend_from_slice(&seq.token_ids);
    ids.push(SEP);
    ids
}

/// The span whole-eventuality masking would pick from, and whether the
/// shortest-span fallback applies.
pub fn eligible_spans(seq: &TokenSequence, budget_fraction: f64) -> (Vec<EventualitySpan>, bool) {
    let budget = mask_budget(seq.len(), budget_fraction);
    let eligible: Vec<_> = seq
        .eventuality_spans
        .iter()
        .filter(|s| s.len() <= budget)
        .copied()
        .collect();
    if !eligible.is_empty() {
        return (eligible, false);
    }
    let shortest = seq
        .eventuality_spans
        .iter()
        .min_by_key(|s| (s.len(), s.start))
        .copied();
    (shortest.into_iter().collect(), true)
}

/// Masks one eventuality span chosen uniformly among those within the
/// budget, falling back to the shortest span. Each position gets the
/// mask/random/keep corruption independently.
pub fn apply_whole_eventuality_mask<R: Rng + ?Sized>(
    seq: &TokenSequence,
    vocab_size: usize,
    rng: &mut R,
    config: &MaskConfig,
) -> Result<TrainingInstance, MaskError> {
    if seq.eventuality_spans.is_empty() {
        return Err(MaskError::NoEventualitySpans);
    }
    let (candidates, _fallback) = eligible_spans(seq, config.budget_fraction);
    let span = candidates[rng.gen_range(0..candidates.len())];
    let mut input_ids = wrap(seq);
    let mut mlm_targets = BTreeMap::new();
    for pos in span.start + 1..span.end + 1 {
        mlm_targets.insert(pos, input_ids[pos]);
        let u: f64 = rng.gen();
        if u < config.mask_token_prob {
            input_ids[pos] = MASK;
        } else if u < config.mask_token_prob + config.random_token_prob {
            input_ids[pos] = rng.gen_range(NUM_RESERVED..vocab_size.max(NUM_RESERVED as usize + 1) as u32);
        }
    }
    Ok(TrainingInstance {
        input_ids,
        mlm_targets,
        relation_targets: BTreeMap::new(),
        cooc: None,
        strategy: MaskStrategy::WholeEventuality,
    })
}

/// Replaces every connective token with `[MASK]` and labels the first token
/// of each connective span with its relation.
pub fn apply_connective_mask(seq: &TokenSequence) -> Result<TrainingInstance, MaskError> {
    if seq.connective_spans.is_empty() {
        return Err(MaskError::NoConnectiveSpans);
    }
    let mut input_ids = wrap(seq);
    let mut mlm_targets = BTreeMap::new();
    let mut relation_targets = BTreeMap::new();
    for span in &seq.connective_spans {
        relation_targets.insert(span.start + 1, span.relation);
        for pos in span.start + 1..span.end + 1 {
            mlm_targets.insert(pos, input_ids[pos]);
            input_ids[pos] = MASK;
        }
    }
    Ok(TrainingInstance {
        input_ids,
        mlm_targets,
        relation_targets,
        cooc: None,
        strategy: MaskStrategy::Connective,
    })
}

/// Pairs the path with a candidate eventuality: half the time a co-occurrence
/// neighbor of some path node, otherwise a node that is neither a neighbor
/// nor on the path.
pub fn make_cooccurrence_instance<R: Rng + ?Sized>(
    path: &EventualityPath,
    seq: &TokenSequence,
    graph: &KnowledgeGraph,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<CoocInstance, MaskError> {
    let on_path: BTreeSet<NodeId> = path.nodes.iter().copied().collect();
    let mut positives = BTreeSet::new();
    for &n in &path.nodes {
        let neighbors = graph
            .co_occurrence_neighbors(n)
            .map_err(|_| VerbalizeError::UnknownNode(n))?;
        positives.extend(neighbors.iter().copied().filter(|m| !on_path.contains(m)));
    }
    if positives.is_empty() {
        return Err(MaskError::NoPositiveCandidate);
    }
    let positive = rng.gen_bool(0.5);
    let candidate_node = if positive {
        *positives.iter().nth(rng.gen_range(0..positives.len())).expect("index in range")
    } else {
        let n = graph.num_nodes();
        let excluded = |m: NodeId| positives.contains(&m) || on_path.contains(&m);
        let free = n - positives.len() - on_path.len();
        if free == 0 {
            return Err(MaskError::NoNegativeCandidate);
        }
        let mut pick = None;
        for _ in 0..64 {
            let m = rng.gen_range(0..n) as NodeId;
            if !excluded(m) {
                pick = Some(m);
                break;
            }
        }
        match pick {
            Some(m) => m,
            None => {
                let k = rng.gen_range(0..free);
                (0..n as NodeId).filter(|&m| !excluded(m)).nth(k).expect("free count is exact")
            }
        }
    };
    let node = graph.node(candidate_node).map_err(|_| VerbalizeError::UnknownNode(candidate_node))?;
    Ok(CoocInstance {
        sequence: seq.token_ids.clone(),
        candidate: vocab.encode(&node.text),
        candidate_node,
        positive,
    })
}

/// Picks one masking strategy for the sequence and attaches a co-occurrence
/// candidate when one can be built.
pub fn build_instance<R: Rng + ?Sized>(
    seq: &TokenSequence,
    path: &EventualityPath,
    graph: &KnowledgeGraph,
    vocab: &Vocabulary,
    rng: &mut R,
    config: &MaskConfig,
) -> Result<TrainingInstance, MaskError> {
    let mut instance = if rng.gen::<f64>() < config.whole_eventuality_prob {
        apply_whole_eventuality_mask(seq, vocab.len(), rng, config)?
    } else {
        apply_connective_mask(seq)?
    };
    if config.cooccurrence {
        match make_cooccurrence_instance(path, seq, graph, vocab, rng) {
            Ok(c) => instance.cooc = Some(c.target()),
            Err(MaskError::NoPositiveCandidate | MaskError::NoNegativeCandidate) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(instance)
}

/// Verbalizes and masks a whole corpus from one seeded stream.
pub fn build_instances(
    corpus: &[EventualityPath],
    graph: &KnowledgeGraph,
    lexicon: &ConnectiveLexicon,
    vocab: &Vocabulary,
    config: &MaskConfig,
) -> Result<Vec<TrainingInstance>, MaskError> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed);
    corpus
        .iter()
        .map(|path| {
            let seq = verbalize(path, graph, lexicon, vocab)?;
            build_instance(&seq, path, graph, vocab, &mut rng, config)
        })
        .collect()
}
