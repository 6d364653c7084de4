//! Word-level vocabulary with five reserved ids.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::kg::KnowledgeGraph;
use crate::lexicon::ConnectiveLexicon;
use crate::walk::EventualityPath;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_RESERVED: u32 = 5;
pub const RESERVED: [&str; NUM_RESERVED as usize] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {0} is out of range")]
    IdOutOfRange(u32),
    #[error("path references node {0} which is not in the graph")]
    UnknownNode(u32),
    #[error("vocab file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Counts node and connective words over the corpus. Every connective word
    /// is kept; node words need `count >= min_count`. Ids follow descending
    /// count, then lexicographic order.
    pub fn build(
        corpus: &[EventualityPath],
        graph: &KnowledgeGraph,
        lexicon: &ConnectiveLexicon,
        min_count: usize,
    ) -> Result<Self, VocabError> {
        if corpus.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for path in corpus {
            for &id in &path.nodes {
                let node = graph.node(id).map_err(|_| VocabError::UnknownNode(id))?;
                for w in &node.text {
                    *counts.entry(w.as_str()).or_default() += 1;
                }
            }
            for &r in &path.relations {
                for w in lexicon.connective(r).unwrap_or_default() {
                    *counts.entry(w.as_str()).or_default() += 1;
                }
            }
        }
        let connective_words = lexicon.words();
        for w in &connective_words {
            counts.entry(w).or_default();
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count || connective_words.contains(w))
            .filter(|(w, _)| !RESERVED.contains(w))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn token(&self, id: u32) -> Result<&str, VocabError> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(VocabError::IdOutOfRange(id))
    }

    /// Lowercases and whitespace-splits `text`, mapping unknown words to `[UNK]`.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(&w.to_lowercase())).collect()
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>, VocabError> {
        ids.iter().map(|&id| self.token(id).map(str::to_string)).collect()
    }

    pub fn write<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(out, "{t}\t{i}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self, VocabError> {
        let mut tokens = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| VocabError::Malformed { line: i + 1, reason };
            let (token, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| bad("expected token<TAB>id".into()))?;
            let id: usize = id.parse().map_err(|_| bad(format!("bad id {id:?}")))?;
            if id != tokens.len() {
                return Err(bad(format!("expected id {}, found {id}", tokens.len())));
            }
            if id < RESERVED.len() && token != RESERVED[id] {
                return Err(bad(format!("reserved id {id} must be {}", RESERVED[id])));
            }
            tokens.push(token.to_string());
        }
        if tokens.len() < RESERVED.len() {
            return Err(VocabError::Malformed {
                line: tokens.len(),
                reason: "missing reserved tokens".into(),
            });
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(VocabError::Malformed {
                line: 0,
                reason: "duplicate token".into(),
            });
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::RelationType;

    fn fixture() -> (KnowledgeGraph, Vec<EventualityPath>) {
        let g = KnowledgeGraph::load(
            "0\t9\tthey speak\n1\t9\tthey have a interest\n2\t9\tthey come there\n".as_bytes(),
            "0\t1\tCondition\t1\n1\t2\tReason\t1\n".as_bytes(),
        )
        .unwrap();
        let p = EventualityPath {
            nodes: vec![0, 1, 2],
            relations: vec![RelationType::Condition, RelationType::Reason],
        };
        (g, vec![p])
    }

    #[test]
    fn contains_node_and_connective_words() {
        let (g, corpus) = fixture();
        let lex = ConnectiveLexicon::default();
        let v = Vocabulary::build(&corpus, &g, &lex, 1).unwrap();
        for w in ["they", "speak", "have", "a", "interest", "if", "because", "example", "meanwhile"] {
            assert!(v.contains(w), "{w}");
        }
        // "they" appears three times and sorts first after the reserved block
        assert_eq!(v.token(5).unwrap(), "they");
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.token(i as u32).unwrap(), *r);
        }
    }

    #[test]
    fn high_cutoff_keeps_only_connectives() {
        let (g, corpus) = fixture();
        let lex = ConnectiveLexicon::default();
        let v = Vocabulary::build(&corpus, &g, &lex, 100).unwrap();
        assert_eq!(v.id("speak"), UNK);
        assert_eq!(v.len(), RESERVED.len() + lex.words().len());
        assert!(v.contains("because"));
    }

    #[test]
    fn build_is_deterministic_and_file_round_trips() {
        let (g, corpus) = fixture();
        let lex = ConnectiveLexicon::default();
        let a = Vocabulary::build(&corpus, &g, &lex, 1).unwrap();
        let b = Vocabulary::build(&corpus, &g, &lex, 1).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        a.write(&mut buf).unwrap();
        assert_eq!(Vocabulary::read(&buf[..]).unwrap(), a);
    }

    #[test]
    fn decode_and_errors() {
        let (g, corpus) = fixture();
        let v = Vocabulary::build(&corpus, &g, &ConnectiveLexicon::default(), 1).unwrap();
        assert_eq!(v.decode(&[CLS, v.id("they")]).unwrap(), vec!["[CLS]", "they"]);
        assert!(matches!(v.decode(&[1_000_000_000]), Err(VocabError::IdOutOfRange(1_000_000_000))));
        assert!(matches!(
            Vocabulary::build(&[], &g, &ConnectiveLexicon::default(), 1),
            Err(VocabError::EmptyCorpus)
        ));
        assert!(matches!(
            Vocabulary::read("[UNK]\t0\n".as_bytes()),
            Err(VocabError::Malformed { .. })
        ));
        assert_eq!(v.encode_text("They SPEAK zebra"), vec![v.id("they"), v.id("speak"), UNK]);
    }
}
