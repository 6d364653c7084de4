//! Mapping from discourse relations to the connective words that express them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use thiserror::Error;

use crate::kg::RelationType;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("relation {0} has no connective")]
    Missing(RelationType),
    #[error("connective for {0} is empty")]
    Empty(RelationType),
    #[error("CoOccurrence cannot have a connective")]
    CoOccurrence,
    #[error("connective {connective:?} is used by both {first} and {second}")]
    Ambiguous {
        connective: String,
        first: RelationType,
        second: RelationType,
    },
    #[error("bad lexicon file: {0}")]
    Parse(String),
}

/// Connective word sequence for each of the 14 discourse relations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectiveLexicon {
    entries: Vec<Vec<String>>,
}

const DEFAULTS: [(RelationType, &str); RelationType::NUM_DISCOURSE] = [
    (RelationType::Precedence, "then"),
    (RelationType::Succession, "after"),
    (RelationType::Synchronous, "meanwhile"),
    (RelationType::Reason, "because"),
    (RelationType::Result, "so"),
    (RelationType::Condition, "if"),
    (RelationType::Contrast, "but"),
    (RelationType::Concession, "although"),
    (RelationType::Conjunction, "and"),
    (RelationType::Instantiation, "for example"),
    (RelationType::Restatement, "in other words"),
    (RelationType::Alternative, "or"),
    (RelationType::ChosenAlternative, "instead"),
    (RelationType::Exception, "except"),
];

fn split(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

impl Default for ConnectiveLexicon {
    fn default() -> Self {
        Self::from_map(DEFAULTS.iter().map(|(r, s)| (*r, s.to_string())).collect())
            .expect("default lexicon is valid")
    }
}

impl ConnectiveLexicon {
    /// Builds a lexicon from a complete relation map.
    pub fn from_map(map: BTreeMap<RelationType, String>) -> Result<Self, LexiconError> {
        if map.contains_key(&RelationType::CoOccurrence) {
            return Err(LexiconError::CoOccurrence);
        }
        let mut entries = Vec::with_capacity(RelationType::NUM_DISCOURSE);
        let mut owners: BTreeMap<Vec<String>, RelationType> = BTreeMap::new();
        for relation in RelationType::discourse() {
            let words = split(map.get(&relation).ok_or(LexiconError::Missing(relation))?);
            if words.is_empty() {
                return Err(LexiconError::Empty(relation));
            }
            if let Some(&first) = owners.get(&words) {
                return Err(LexiconError::Ambiguous {
                    connective: words.join(" "),
                    first,
                    second: relation,
                });
            }
            owners.insert(words.clone(), relation);
            entries.push(words);
        }
        Ok(ConnectiveLexicon { entries })
    }

    /// Applies a JSON `{"Relation": "connective", ...}` override on top of the defaults.
    pub fn with_overrides<R: Read>(reader: R) -> Result<Self, LexiconError> {
        let raw: BTreeMap<String, String> =
            serde_json::from_reader(reader).map_err(|e| LexiconError::Parse(e.to_string()))?;
        let mut map: BTreeMap<RelationType, String> = DEFAULTS.iter().map(|(r, s)| (*r, s.to_string())).collect();
        for (name, connective) in raw {
            let relation: RelationType = name.parse().map_err(|e| LexiconError::Parse(format!("{e}")))?;
            map.insert(relation, connective);
        }
        Self::from_map(map)
    }

    /// Connective tokens for a discourse relation; `None` for `CoOccurrence`.
    pub fn connective(&self, relation: RelationType) -> Option<&[String]> {
        relation
            .is_discourse()
            .then(|| self.entries[relation.index()].as_slice())
    }

    pub fn relation_of(&self, tokens: &[String]) -> Option<RelationType> {
        self.entries
            .iter()
            .position(|e| e.as_slice() == tokens)
            .and_then(RelationType::from_index)
    }

    pub fn entries(&self) -> impl Iterator<Item = (RelationType, &[String])> {
        RelationType::discourse().zip(self.entries.iter().map(Vec::as_slice))
    }

    /// Every distinct word appearing in some connective.
    pub fn words(&self) -> BTreeSet<&str> {
        self.entries.iter().flatten().map(String::as_str).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_covers_every_discourse_relation() {
        let lex = ConnectiveLexicon::default();
        for r in RelationType::discourse() {
            let c = lex.connective(r).unwrap();
            assert!(!c.is_empty());
            assert_eq!(lex.relation_of(c), Some(r));
        }
        assert_eq!(lex.connective(RelationType::CoOccurrence), None);
        assert_eq!(lex.connective(RelationType::Instantiation).unwrap(), ["for", "example"]);
        assert!(lex.words().contains("because"));
    }

    #[test]
    fn overrides_merge_with_defaults() {
        let lex = ConnectiveLexicon::with_overrides(r#"{"reason": "since", "Result": "As A Result"}"#.as_bytes()).unwrap();
        assert_eq!(lex.connective(RelationType::Reason).unwrap(), ["since"]);
        assert_eq!(lex.connective(RelationType::Result).unwrap(), ["as", "a", "result"]);
        assert_eq!(lex.connective(RelationType::Contrast).unwrap(), ["but"]);
    }

    #[test]
    fn rejects_bad_overrides() {
        assert!(matches!(
            ConnectiveLexicon::with_overrides(r#"{"Reason": "  "}"#.as_bytes()),
            Err(LexiconError::Empty(RelationType::Reason))
        ));
        assert!(matches!(
            ConnectiveLexicon::with_overrides(r#"{"Reason": "so"}"#.as_bytes()),
            Err(LexiconError::Ambiguous { .. })
        ));
        assert!(matches!(
            ConnectiveLexicon::with_overrides(r#"{"CoOccurrence": "with"}"#.as_bytes()),
            Err(LexiconError::CoOccurrence)
        ));
        assert!(matches!(
            ConnectiveLexicon::with_overrides(r#"{"Because": "so"}"#.as_bytes()),
            Err(LexiconError::Parse(_))
        ));
    }
}
