//! Path to token sequence conversion with span annotations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{KnowledgeGraph, NodeId, RelationType};
use crate::lexicon::ConnectiveLexicon;
use crate::vocab::Vocabulary;
use crate::walk::EventualityPath;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VerbalizeError {
    #[error("node {0} is not in the graph")]
    UnknownNode(NodeId),
    #[error("path has {nodes} nodes for {relations} relations")]
    InvalidPath { nodes: usize, relations: usize },
    #[error("relation {0} has no connective")]
    NoConnective(RelationType),
}

/// Half-open token range `[start, end)` covering one eventuality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventualitySpan {
    pub start: usize,
    pub end: usize,
    pub node: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectiveSpan {
    pub start: usize,
    pub end: usize,
    pub relation: RelationType,
}

impl EventualitySpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

impl ConnectiveSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Encoded path text: `E0 c(r0) E1 ... c(r_{l-1}) El`, without `[CLS]`/`[SEP]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    pub eventuality_spans: Vec<EventualitySpan>,
    pub connective_spans: Vec<ConnectiveSpan>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Plain words of a verbalized path.
pub fn path_words(
    path: &EventualityPath,
    graph: &KnowledgeGraph,
    lexicon: &ConnectiveLexicon,
) -> Result<Vec<String>, VerbalizeError> {
    let mut words = Vec::new();
    for (i, &id) in path.nodes.iter().enumerate() {
        if i > 0 {
            let r = path.relations[i - 1];
            words.extend(lexicon.connective(r).ok_or(VerbalizeError::NoConnective(r))?.iter().cloned());
        }
        words.extend(graph.node(id).map_err(|_| VerbalizeError::UnknownNode(id))?.text.iter().cloned());
    }
    Ok(words)
}

pub fn verbalize(
    path: &EventualityPath,
    graph: &KnowledgeGraph,
    lexicon: &ConnectiveLexicon,
    vocab: &Vocabulary,
) -> Result<TokenSequence, VerbalizeError> {
    if path.nodes.len() != path.relations.len() + 1 {
        return Err(VerbalizeError::InvalidPath {
            nodes: path.nodes.len(),
            relations: path.relations.len(),
        });
    }
    let mut seq = TokenSequence {
        token_ids: Vec::new(),
        eventuality_spans: Vec::with_capacity(path.nodes.len()),
        connective_spans: Vec::with_capacity(path.relations.len()),
    };
    for (i, &id) in path.nodes.iter().enumerate() {
        if i > 0 {
            let relation = path.relations[i - 1];
            let words = lexicon.connective(relation).ok_or(VerbalizeError::NoConnective(relation))?;
            let start = seq.token_ids.len();
            seq.token_ids.extend(vocab.encode(words));
            seq.connective_spans.push(ConnectiveSpan {
                start,
                end: seq.token_ids.len(),
                relation,
            });
        }
        let node = graph.node(id).map_err(|_| VerbalizeError::UnknownNode(id))?;
        let start = seq.token_ids.len();
        seq.token_ids.extend(vocab.encode(&node.text));
        seq.eventuality_spans.push(EventualitySpan {
            start,
            end: seq.token_ids.len(),
            node: id,
        });
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table2() -> (KnowledgeGraph, EventualityPath) {
        let g = KnowledgeGraph::load(
            "0\t9\tThey speak\n1\t9\tThey have a interest\n2\t9\tthey come there\n3\t9\tpeople wait\n".as_bytes(),
            "0\t1\tCondition\t1\n1\t2\tReason\t1\n2\t3\tInstantiation\t1\n".as_bytes(),
        )
        .unwrap();
        let p = EventualityPath {
            nodes: vec![0, 1, 2],
            relations: vec![RelationType::Condition, RelationType::Reason],
        };
        (g, p)
    }

    #[test]
    fn causal_example_sentence() {
        let (g, p) = table2();
        let lex = ConnectiveLexicon::default();
        let vocab = Vocabulary::build(std::slice::from_ref(&p), &g, &lex, 1).unwrap();
        let seq = verbalize(&p, &g, &lex, &vocab).unwrap();
        assert_eq!(
            vocab.decode(&seq.token_ids).unwrap().join(" "),
            "they speak if they have a interest because they come there"
        );
        assert_eq!(
            seq.connective_spans,
            vec![
                ConnectiveSpan {
                    start: 2,
                    end: 3,
                    relation: RelationType::Condition
                },
                ConnectiveSpan {
                    start: 7,
                    end: 8,
                    relation: RelationType::Reason
                },
            ]
        );
        assert_eq!(
            seq.eventuality_spans.iter().map(|s| (s.start, s.end, s.node)).collect::<Vec<_>>(),
            vec![(0, 2, 0), (3, 7, 1), (8, 11, 2)]
        );
        assert_eq!(seq, verbalize(&p, &g, &lex, &vocab).unwrap());
    }

    #[test]
    fn multi_word_connective_is_one_span() {
        let (g, _) = table2();
        let p = EventualityPath {
            nodes: vec![2, 3],
            relations: vec![RelationType::Instantiation],
        };
        let lex = ConnectiveLexicon::default();
        let vocab = Vocabulary::build(std::slice::from_ref(&p), &g, &lex, 1).unwrap();
        let seq = verbalize(&p, &g, &lex, &vocab).unwrap();
        assert_eq!(seq.connective_spans.len(), 1);
        assert_eq!(seq.connective_spans[0].len(), 2);
    }

    #[test]
    fn rejects_bad_paths() {
        let (g, _) = table2();
        let lex = ConnectiveLexicon::default();
        let p = EventualityPath {
            nodes: vec![0, 1],
            relations: vec![RelationType::Result],
        };
        let vocab = Vocabulary::build(std::slice::from_ref(&p), &g, &lex, 1).unwrap();
        let bad = EventualityPath {
            nodes: vec![0, 9],
            relations: vec![RelationType::Result],
        };
        assert_eq!(verbalize(&bad, &g, &lex, &vocab), Err(VerbalizeError::UnknownNode(9)));
        let bad = EventualityPath {
            nodes: vec![0, 1],
            relations: vec![],
        };
        assert!(matches!(verbalize(&bad, &g, &lex, &vocab), Err(VerbalizeError::InvalidPath { .. })));
        let bad = EventualityPath {
            nodes: vec![0, 1],
            relations: vec![RelationType::CoOccurrence],
        };
        assert!(matches!(verbalize(&bad, &g, &lex, &vocab), Err(VerbalizeError::NoConnective(_))));
    }

    fn chain_graph() -> KnowledgeGraph {
        let nodes: String = (0..6).map(|i| format!("{i}\t9\tw{i} x{} y\n", i % 3)).collect();
        KnowledgeGraph::load(nodes.as_bytes(), "".as_bytes()).unwrap()
    }

    proptest! {
        #[test]
        fn spans_tile_the_sequence(
            nodes in prop::collection::vec(0u32..6, 2..7),
            rels in prop::collection::vec(0usize..14, 6),
        ) {
            let g = chain_graph();
            let lex = ConnectiveLexicon::default();
            let relations: Vec<RelationType> = rels[..nodes.len() - 1].iter().map(|&i| RelationType::ALL[i]).collect();
            let path = EventualityPath { nodes, relations };
            let vocab = Vocabulary::build(std::slice::from_ref(&path), &g, &lex, 1).unwrap();
            let seq = verbalize(&path, &g, &lex, &vocab).unwrap();

            // alternate eventuality / connective with no gaps or overlap
            let mut cursor = 0;
            for (i, ev) in seq.eventuality_spans.iter().enumerate() {
                if i > 0 {
                    let c = seq.connective_spans[i - 1];
                    prop_assert_eq!(c.start, cursor);
                    prop_assert!(c.end > c.start);
                    prop_assert_eq!(c.relation, path.relations[i - 1]);
                    prop_assert_eq!(lex.connective(c.relation).unwrap().len(), c.len());
                    cursor = c.end;
                }
                prop_assert_eq!(ev.start, cursor);
                prop_assert_eq!(ev.node, path.nodes[i]);
                cursor = ev.end;
            }
            prop_assert_eq!(cursor, seq.len());
            prop_assert_eq!(seq.connective_spans.len(), path.relations.len());
            // decoding gives back the words when nothing falls under the cutoff
            prop_assert_eq!(vocab.decode(&seq.token_ids).unwrap(), path_words(&path, &g, &lex).unwrap());
        }
    }
}
