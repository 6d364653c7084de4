//! Connective cloze probing, candidate plausibility choice, and held-out
//! relation evaluation. Nothing here mutates the encoder.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{Edge, KnowledgeGraph, NodeId, RelationType};
use crate::lexicon::ConnectiveLexicon;
use crate::masking::{apply_connective_mask, MaskError};
use crate::model::tensor::softmax_in_place;
use crate::model::{Batch, Encoder, Example, LossSwitches, ModelError};
use crate::scalar::Scalar;
use crate::verbalize::{verbalize, VerbalizeError};
use crate::vocab::{Vocabulary, CLS, MASK, NUM_RESERVED, SEP, UNK};
use crate::walk::EventualityPath;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("query text is empty")]
    EmptyText,
    #[error("every query word is out of vocabulary")]
    EmptyAfterUnking,
    #[error("a choice task needs at least two candidates, found {0}")]
    TooFewCandidates(usize),
    #[error("choice candidates must be distinct")]
    DuplicateCandidates,
    #[error("gold index {gold} is out of range for {candidates} candidates")]
    GoldOutOfRange { gold: usize, candidates: usize },
    #[error("no held-out edges to evaluate")]
    EmptyHeldOut,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Verbalize(#[from] VerbalizeError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

fn default_k() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeQuery {
    pub left: String,
    pub right: String,
    #[serde(rename = "k", default = "default_k")]
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedConnective {
    pub connective: String,
    pub relation: RelationType,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutput {
    pub left: String,
    pub right: String,
    pub ranking: Vec<RankedConnective>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub token: String,
    pub prob: f64,
}

fn log_softmax<F: Scalar>(logits: &[F]) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().map(|x| x.as_f64()).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    z.into_iter().map(|x| x - lse).collect()
}

fn encode_query(vocab: &Vocabulary, text: &str) -> Result<Vec<u32>, ProbeError> {
    let ids = vocab.encode_text(text);
    if ids.is_empty() {
        return Err(ProbeError::EmptyText);
    }
    Ok(ids)
}

/// Log-probability of every lexicon entry filling the gap between `left`
/// and `right`. An entry of `m` words is scored on
/// `[CLS] left [MASK]*m right [SEP]` as the sum of its per-slot masked-LM
/// log-probabilities; one-word entries reduce to the usual single-mask cloze.
fn connective_log_scores<F: Scalar>(
    encoder: &Encoder<F>,
    vocab: &Vocabulary,
    lexicon: &ConnectiveLexicon,
    left: &[u32],
    right: &[u32],
) -> Result<Vec<(RelationType, String, f64)>, ProbeError> {
    let mut by_len: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (_, words) in lexicon.entries() {
        let m = words.len();
        if by_len.contains_key(&m) {
            continue;
        }
        let mut ids = Vec::with_capacity(left.len() + right.len() + m + 2);
        ids.push(CLS);
        ids.extend_from_slice(left);
        ids.extend(std::iter::repeat(MASK).take(m));
        ids.extend_from_slice(right);
        ids.push(SEP);
        let hidden = encoder.hidden_states(&ids)?;
        let slots = (0..m)
            .map(|j| log_softmax(&encoder.mlm_logits_for(hidden.row(1 + left.len() + j))))
            .collect();
        by_len.insert(m, slots);
    }
    Ok(lexicon
        .entries()
        .map(|(relation, words)| {
            let slots = &by_len[&words.len()];
            let score = words.iter().enumerate().map(|(j, w)| slots[j][vocab.id(w) as usize]).sum();
            (relation, words.join(" "), score)
        })
        .collect())
}

fn rank(scores: Vec<(RelationType, String, f64)>, top_k: usize) -> Vec<RankedConnective> {
    let mut probs: Vec<f64> = scores.iter().map(|s| s.2).collect();
    softmax_in_place(&mut probs);
    let mut ranked: Vec<RankedConnective> = scores
        .into_iter()
        .zip(probs)
        .map(|((relation, connective, _), prob)| RankedConnective {
            connective,
            relation,
            prob,
        })
        .collect();
    ranked.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.relation.cmp(&b.relation)));
    ranked.truncate(top_k);
    ranked
}

/// Ranks lexicon connectives for the gap between two event texts, with
/// probabilities renormalized over the lexicon.
pub fn probe_connective<F: Scalar>(
    encoder: &Encoder<F>,
    vocab: &Vocabulary,
    lexicon: &ConnectiveLexicon,
    query: &ProbeQuery,
) -> Result<ProbeOutput, ProbeError> {
    let left = encode_query(vocab, &query.left)?;
    let right = encode_query(vocab, &query.right)?;
    if left.iter().chain(&right).all(|&t| t == UNK) {
        return Err(ProbeError::EmptyAfterUnking);
    }
    let scores = connective_log_scores(encoder, vocab, lexicon, &left, &right)?;
    Ok(ProbeOutput {
        left: query.left.clone(),
        right: query.right.clone(),
        ranking: rank(scores, query.top_k),
    })
}

/// Open-vocabulary variant: one `[MASK]`, full softmax, reserved tokens
/// excluded and the rest renormalized.
pub fn probe_full_vocabulary<F: Scalar>(
    encoder: &Encoder<F>,
    vocab: &Vocabulary,
    query: &ProbeQuery,
) -> Result<Vec<RankedToken>, ProbeError> {
    let left = encode_query(vocab, &query.left)?;
    let right = encode_query(vocab, &query.right)?;
    if left.iter().chain(&right).all(|&t| t == UNK) {
        return Err(ProbeError::EmptyAfterUnking);
    }
    let mut ids = vec![CLS];
    ids.extend_from_slice(&left);
    ids.push(MASK);
    ids.extend_from_slice(&right);
    ids.push(SEP);
    let hidden = encoder.hidden_states(&ids)?;
    let logits = encoder.mlm_logits_for(hidden.row(1 + left.len()));
    let mut p: Vec<f64> = logits[NUM_RESERVED as usize..].iter().map(|x| x.as_f64()).collect();
    softmax_in_place(&mut p);
    let mut ranked: Vec<RankedToken> = p
        .into_iter()
        .enumerate()
        .map(|(i, prob)| RankedToken {
            token: vocab.token(i as u32 + NUM_RESERVED).unwrap_or("[UNK]").to_string(),
            prob,
        })
        .collect();
    ranked.sort_by(|a, b| b.prob.total_cmp(&a.prob));
    ranked.truncate(query.top_k);
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceTask {
    pub context: String,
    pub candidates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<usize>,
}

impl ChoiceTask {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.candidates.len() < 2 {
            return Err(ProbeError::TooFewCandidates(self.candidates.len()));
        }
        for (i, c) in self.candidates.iter().enumerate() {
            if self.candidates[..i].contains(c) {
                return Err(ProbeError::DuplicateCandidates);
            }
        }
        if let Some(gold) = self.gold {
            if gold >= self.candidates.len() {
                return Err(ProbeError::GoldOutOfRange {
                    gold,
                    candidates: self.candidates.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceResult {
    pub chosen: usize,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

/// Positive-class probability of `[CLS] context [SEP] candidate [SEP]`
/// under the co-occurrence head.
pub fn plausibility<F: Scalar>(
    encoder: &Encoder<F>,
    vocab: &Vocabulary,
    context: &str,
    candidate: &str,
) -> Result<f64, ProbeError> {
    let mut ids = vec![CLS];
    ids.extend(encode_query(vocab, context)?);
    ids.push(SEP);
    ids.extend(encode_query(vocab, candidate)?);
    ids.push(SEP);
    let hidden = encoder.hidden_states(&ids)?;
    let mut p = encoder.cooc_logits_for(hidden.row(0));
    softmax_in_place(&mut p);
    Ok(p[1].as_f64())
}

/// Scores every candidate and picks the most plausible; ties go to the
/// lowest index.
pub fn score_choice<F: Scalar>(
    encoder: &Encoder<F>,
    vocab: &Vocabulary,
    task: &ChoiceTask,
) -> Result<ChoiceResult, ProbeError> {
    task.validate()?;
    let scores = task
        .candidates
        .iter()
        .map(|c| plausibility(encoder, vocab, &task.context, c))
        .collect::<Result<Vec<f64>, _>>()?;
    let mut chosen = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[chosen] {
            chosen = i;
        }
    }
    Ok(ChoiceResult {
        chosen,
        correct: task.gold.map(|g| g == chosen),
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgePrediction {
    pub head: NodeId,
    pub tail: NodeId,
    pub gold: RelationType,
    pub predicted: RelationType,
    /// Top lexicon entry from the masked-LM cloze on the same pair.
    pub cloze: RelationType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationStats {
    pub relation: RelationType,
    pub support: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationEvalReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub cloze_correct: usize,
    pub cloze_accuracy: f64,
    pub per_relation: Vec<RelationStats>,
    /// `confusion[gold][predicted]` over the discourse relations.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<EdgePrediction>,
}

fn argmax<F: Scalar>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Verbalizes each held-out edge as a one-hop sequence, masks its
/// connective and compares the relation head's argmax to the edge label.
/// The cloze column ranks lexicon entries with the masked-LM head instead.
pub fn eval_relation_heldout<F: Scalar>(
    encoder: &Encoder<F>,
    edges: &[Edge],
    graph: &KnowledgeGraph,
    lexicon: &ConnectiveLexicon,
    vocab: &Vocabulary,
) -> Result<RelationEvalReport, ProbeError> {
    let edges: Vec<&Edge> = edges.iter().filter(|e| e.relation.is_discourse()).collect();
    if edges.is_empty() {
        return Err(ProbeError::EmptyHeldOut);
    }
    let k = RelationType::NUM_DISCOURSE;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut predictions = Vec::with_capacity(edges.len());
    for chunk in edges.chunks(64) {
        let mut examples = Vec::with_capacity(chunk.len());
        let mut seqs = Vec::with_capacity(chunk.len());
        for e in chunk {
            let path = EventualityPath {
                nodes: vec![e.head, e.tail],
                relations: vec![e.relation],
            };
            let seq = verbalize(&path, graph, lexicon, vocab)?;
            let inst = apply_connective_mask(&seq)?;
            examples.push(Example::from_instance(&inst, &LossSwitches::default()));
            seqs.push(seq);
        }
        let batch = Batch::new(examples);
        let fp = encoder.forward(&batch, None)?;
        for (i, e) in chunk.iter().enumerate() {
            let predicted = RelationType::from_index(argmax(&fp.activations.relation_logits[i][0]))
                .expect("relation head has one logit per discourse relation");
            let seq = &seqs[i];
            let span = seq.connective_spans[0];
            let scores = connective_log_scores(
                encoder,
                vocab,
                lexicon,
                &seq.token_ids[..span.start],
                &seq.token_ids[span.end..],
            )?;
            let cloze = scores
                .iter()
                .fold(None::<&(RelationType, String, f64)>, |best, s| match best {
                    Some(b) if b.2 >= s.2 => Some(b),
                    _ => Some(s),
                })
                .map(|s| s.0)
                .expect("lexicon is nonempty");
            confusion[e.relation.index()][predicted.index()] += 1;
            predictions.push(EdgePrediction {
                head: e.head,
                tail: e.tail,
                gold: e.relation,
                predicted,
                cloze,
            });
        }
    }
    let total = predictions.len();
    let correct = predictions.iter().filter(|p| p.gold == p.predicted).count();
    let cloze_correct = predictions.iter().filter(|p| p.gold == p.cloze).count();
    let per_relation = RelationType::discourse()
        .map(|relation| {
            let row = &confusion[relation.index()];
            let support: usize = row.iter().sum();
            let correct = row[relation.index()];
            RelationStats {
                relation,
                support,
                correct,
                accuracy: (support > 0).then(|| correct as f64 / support as f64),
            }
        })
        .collect();
    Ok(RelationEvalReport {
        total,
        correct,
        accuracy: correct as f64 / total as f64,
        cloze_correct,
        cloze_accuracy: cloze_correct as f64 / total as f64,
        per_relation,
        confusion,
        predictions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChoiceSummary {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Accuracy over tasks that carry a gold index.
pub fn choice_accuracy<F: Scalar>(
    encoder: &Encoder<F>,
    vocab: &Vocabulary,
    tasks: &[ChoiceTask],
) -> Result<ChoiceSummary, ProbeError> {
    let (mut total, mut correct) = (0, 0);
    for task in tasks.iter().filter(|t| t.gold.is_some()) {
        let r = score_choice(encoder, vocab, task)?;
        total += 1;
        correct += usize::from(r.correct == Some(true));
    }
    Ok(ChoiceSummary {
        total,
        correct,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
    })
}
