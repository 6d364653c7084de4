//! Immutable eventuality knowledge graph with weighted, typed discourse edges.
//!
//! Nodes and edges are read from two TSV streams:
//!
//! ```text
//! nodes: id<TAB>frequency<TAB>space-joined tokens
//! edges: head_id<TAB>tail_id<TAB>relation_name<TAB>weight
//! ```
//!
//! Lines starting with `#` and blank lines are ignored. Out-edges are kept in a
//! compressed sparse row layout sorted by `(head, tail, relation)`.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub type NodeId = u32;

/// Discourse relation labels plus the non-discourse co-occurrence link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelationType {
    Precedence,
    Succession,
    Synchronous,
    Reason,
    Result,
    Condition,
    Contrast,
    Concession,
    Conjunction,
    Instantiation,
    Restatement,
    Alternative,
    ChosenAlternative,
    Exception,
    CoOccurrence,
}

impl RelationType {
    pub const ALL: [RelationType; 15] = [
        RelationType::Precedence,
        RelationType::Succession,
        RelationType::Synchronous,
        RelationType::Reason,
        RelationType::Result,
        RelationType::Condition,
        RelationType::Contrast,
        RelationType::Concession,
        RelationType::Conjunction,
        RelationType::Instantiation,
        RelationType::Restatement,
        RelationType::Alternative,
        RelationType::ChosenAlternative,
        RelationType::Exception,
        RelationType::CoOccurrence,
    ];

    /// Number of discourse labels (everything except `CoOccurrence`).
    pub const NUM_DISCOURSE: usize = 14;

    pub fn discourse() -> impl Iterator<Item = RelationType> {
        Self::ALL[..Self::NUM_DISCOURSE].iter().copied()
    }

    pub fn is_discourse(self) -> bool {
        self != RelationType::CoOccurrence
    }

    /// Position in [`RelationType::ALL`]; discourse labels occupy `0..14`.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<RelationType> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationType::Precedence => "Precedence",
            RelationType::Succession => "Succession",
            RelationType::Synchronous => "Synchronous",
            RelationType::Reason => "Reason",
            RelationType::Result => "Result",
            RelationType::Condition => "Condition",
            RelationType::Contrast => "Contrast",
            RelationType::Concession => "Concession",
            RelationType::Conjunction => "Conjunction",
            RelationType::Instantiation => "Instantiation",
            RelationType::Restatement => "Restatement",
            RelationType::Alternative => "Alternative",
            RelationType::ChosenAlternative => "ChosenAlternative",
            RelationType::Exception => "Exception",
            RelationType::CoOccurrence => "CoOccurrence",
        }
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown relation label {0:?}")]
pub struct UnknownRelation(pub String);

impl FromStr for RelationType {
    type Err = UnknownRelation;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownRelation(s.to_string()))
    }
}

impl Serialize for RelationType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for RelationType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A verb-centric phrase node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Eventuality {
    pub id: NodeId,
    pub text: Vec<String>,
    pub frequency: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub head: NodeId,
    pub tail: NodeId,
    pub relation: RelationType,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Nodes,
    Edges,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Nodes => f.write_str("nodes"),
            Source::Edges => f.write_str("edges"),
        }
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{file} line {line}: malformed line: {reason}")]
    MalformedLine {
        file: Source,
        line: usize,
        reason: String,
    },
    #[error("nodes line {line}: duplicate node id {id}")]
    DuplicateNodeId { line: usize, id: NodeId },
    #[error("node ids are not dense: id {missing} is missing")]
    NonDenseNodeIds { missing: NodeId },
    #[error("edges line {line}: unknown node id {id}")]
    UnknownNodeReference { line: usize, id: NodeId },
    #[error("edges line {line}: weight {weight} is not a positive finite number")]
    NonPositiveWeight { line: usize, weight: f64 },
    #[error("edges line {line}: {label}")]
    UnknownRelationLabel { line: usize, label: UnknownRelation },
    #[error("edges line {line}: duplicate edge ({head}, {tail}, {relation})")]
    DuplicateEdge {
        line: usize,
        head: NodeId,
        tail: NodeId,
        relation: RelationType,
    },
    #[error("edges line {line}: self loop on node {id}")]
    SelfLoop { line: usize, id: NodeId },
    #[error("node {0} is out of range")]
    NodeOutOfRange(NodeId),
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("percentile fraction {0} is outside (0, 1]")]
    InvalidFraction(f64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Frozen eventuality graph. All queries are read-only, so a loaded graph can
/// be shared across threads freely.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    nodes: Vec<Eventuality>,
    offsets: Vec<usize>,
    edges: Vec<Edge>,
    co_occurrence: Vec<Vec<NodeId>>,
}

fn data_lines<R: BufRead>(reader: R) -> impl Iterator<Item = io::Result<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)))
        .filter(|r| match r {
            Ok((_, l)) => {
                let t = l.trim();
                !t.is_empty() && !t.starts_with('#')
            }
            Err(_) => true,
        })
}

fn malformed(file: Source, line: usize, reason: impl Into<String>) -> GraphError {
    GraphError::MalformedLine {
        file,
        line,
        reason: reason.into(),
    }
}

impl KnowledgeGraph {
    /// Reads and validates both TSV streams. Any bad line rejects the whole load.
    pub fn load<N: BufRead, E: BufRead>(nodes_source: N, edges_source: E) -> Result<Self, GraphError> {
        let mut slots: Vec<Option<Eventuality>> = Vec::new();
        for item in data_lines(nodes_source) {
            let (line, text) = item?;
            let mut fields = text.trim_end_matches(['\r', '\n']).splitn(3, '\t');
            let (Some(id), Some(freq), Some(words)) = (fields.next(), fields.next(), fields.next()) else {
                return Err(malformed(Source::Nodes, line, "expected 3 tab-separated fields"));
            };
            let id: NodeId = id
                .trim()
                .parse()
                .map_err(|_| malformed(Source::Nodes, line, format!("bad node id {id:?}")))?;
            let frequency: u64 = freq
                .trim()
                .parse()
                .map_err(|_| malformed(Source::Nodes, line, format!("bad frequency {freq:?}")))?;
            let tokens: Vec<String> = words.split_whitespace().map(str::to_lowercase).collect();
            if tokens.is_empty() {
                return Err(malformed(Source::Nodes, line, "empty eventuality text"));
            }
            let slot = id as usize;
            if slot >= slots.len() {
                slots.resize(slot + 1, None);
            }
            if slots[slot].is_some() {
                return Err(GraphError::DuplicateNodeId { line, id });
            }
            slots[slot] = Some(Eventuality {
                id,
                text: tokens,
                frequency,
            });
        }
        let mut nodes = Vec::with_capacity(slots.len());
        for (i, slot) in slots.into_iter().enumerate() {
            match slot {
                Some(n) => nodes.push(n),
                None => return Err(GraphError::NonDenseNodeIds { missing: i as NodeId }),
            }
        }

        let n = nodes.len();
        let mut edges = Vec::new();
        let mut seen = HashSet::new();
        for item in data_lines(edges_source) {
            let (line, text) = item?;
            let fields: Vec<&str> = text.trim_end_matches(['\r', '\n']).split('\t').collect();
            if fields.len() != 4 {
                return Err(malformed(
                    Source::Edges,
                    line,
                    format!("expected 4 tab-separated fields, found {}", fields.len()),
                ));
            }
            let parse_id = |s: &str| -> Result<NodeId, GraphError> {
                s.trim()
                    .parse()
                    .map_err(|_| malformed(Source::Edges, line, format!("bad node id {s:?}")))
            };
            let head = parse_id(fields[0])?;
            let tail = parse_id(fields[1])?;
            let relation: RelationType = fields[2]
                .trim()
                .parse()
                .map_err(|label| GraphError::UnknownRelationLabel { line, label })?;
            let weight: f64 = fields[3]
                .trim()
                .parse()
                .map_err(|_| malformed(Source::Edges, line, format!("bad weight {:?}", fields[3])))?;
            for id in [head, tail] {
                if id as usize >= n {
                    return Err(GraphError::UnknownNodeReference { line, id });
                }
            }
            if !(weight.is_finite() && weight > 0.0) {
                return Err(GraphError::NonPositiveWeight { line, weight });
            }
            if head == tail {
                return Err(GraphError::SelfLoop { line, id: head });
            }
            if !seen.insert((head, tail, relation)) {
                return Err(GraphError::DuplicateEdge {
                    line,
                    head,
                    tail,
                    relation,
                });
            }
            edges.push(Edge {
                head,
                tail,
                relation,
                weight,
            });
        }
        Ok(Self::from_parts(nodes, edges))
    }

    /// Builds the adjacency from already-validated parts.
    fn from_parts(nodes: Vec<Eventuality>, mut edges: Vec<Edge>) -> Self {
        edges.sort_by_key(|e| (e.head, e.tail, e.relation));
        let mut offsets = vec![0usize; nodes.len() + 1];
        for e in &edges {
            offsets[e.head as usize + 1] += 1;
        }
        for i in 0..nodes.len() {
            offsets[i + 1] += offsets[i];
        }
        // Co-occurrence is symmetric: both endpoints see each other.
        let mut co_occurrence = vec![Vec::new(); nodes.len()];
        for e in edges.iter().filter(|e| e.relation == RelationType::CoOccurrence) {
            co_occurrence[e.head as usize].push(e.tail);
            co_occurrence[e.tail as usize].push(e.head);
        }
        for list in &mut co_occurrence {
            list.sort_unstable();
            list.dedup();
        }
        KnowledgeGraph {
            nodes,
            offsets,
            edges,
            co_occurrence,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[Eventuality] {
        &self.nodes
    }

    /// All edges in `(head, tail, relation)` order.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, id: NodeId) -> Result<&Eventuality, GraphError> {
        self.nodes.get(id as usize).ok_or(GraphError::NodeOutOfRange(id))
    }

    /// Raw out-edge slice of `node`, co-occurrence edges included.
    pub fn out_edges(&self, node: NodeId) -> Result<&[Edge], GraphError> {
        let i = node as usize;
        if i >= self.nodes.len() {
            return Err(GraphError::NodeOutOfRange(node));
        }
        Ok(&self.edges[self.offsets[i]..self.offsets[i + 1]])
    }

    /// Out-edges of `node` in `(tail, relation)` order.
    pub fn neighbors(&self, node: NodeId, include_co_occurrence: bool) -> Result<Vec<Edge>, GraphError> {
        Ok(self
            .out_edges(node)?
            .iter()
            .filter(|e| include_co_occurrence || e.relation.is_discourse())
            .copied()
            .collect())
    }

    pub fn has_discourse_out_edge(&self, node: NodeId) -> bool {
        self.out_edges(node)
            .map(|es| es.iter().any(|e| e.relation.is_discourse()))
            .unwrap_or(false)
    }

    /// Undirected co-occurrence neighbors of `node`, sorted.
    pub fn co_occurrence_neighbors(&self, node: NodeId) -> Result<&[NodeId], GraphError> {
        self.co_occurrence
            .get(node as usize)
            .map(Vec::as_slice)
            .ok_or(GraphError::NodeOutOfRange(node))
    }

    pub fn has_co_occurrence(&self) -> bool {
        self.co_occurrence.iter().any(|l| !l.is_empty())
    }

    /// Nearest-rank percentile of node frequencies: the smallest frequency `f`
    /// such that at least a fraction `q` of nodes have frequency `<= f`.
    pub fn frequency_percentile(&self, q: f64) -> Result<u64, GraphError> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(GraphError::InvalidFraction(q));
        }
        if self.nodes.is_empty() {
            return Err(GraphError::EmptyGraph);
        }
        let mut freqs: Vec<u64> = self.nodes.iter().map(|n| n.frequency).collect();
        freqs.sort_unstable();
        let n = freqs.len();
        // tolerance absorbs q*n landing a hair above an integer
        let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
        Ok(freqs[rank - 1])
    }

    pub fn write_nodes<W: Write>(&self, mut out: W) -> io::Result<()> {
        for node in &self.nodes {
            writeln!(out, "{}\t{}\t{}", node.id, node.frequency, node.text.join(" "))?;
        }
        Ok(())
    }

    pub fn write_edges<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in &self.edges {
            write_edge(&mut out, e)?;
        }
        Ok(())
    }
}

pub fn write_edge<W: Write>(out: &mut W, e: &Edge) -> io::Result<()> {
    writeln!(out, "{}\t{}\t{}\t{}", e.head, e.tail, e.relation, e.weight)
}

/// Reads an edges-format TSV without a node table; used for held-out edge lists.
pub fn read_edge_list<R: BufRead>(reader: R, num_nodes: usize) -> Result<Vec<Edge>, GraphError> {
    let mut out = Vec::new();
    for item in data_lines(reader) {
        let (line, text) = item?;
        let fields: Vec<&str> = text.split('\t').collect();
        if fields.len() != 4 {
            return Err(malformed(Source::Edges, line, "expected 4 tab-separated fields"));
        }
        let parse_id = |s: &str| -> Result<NodeId, GraphError> {
            let id: NodeId = s
                .trim()
                .parse()
                .map_err(|_| malformed(Source::Edges, line, format!("bad node id {s:?}")))?;
            if id as usize >= num_nodes {
                return Err(GraphError::UnknownNodeReference { line, id });
            }
            Ok(id)
        };
        let head = parse_id(fields[0])?;
        let tail = parse_id(fields[1])?;
        let relation = fields[2]
            .trim()
            .parse()
            .map_err(|label| GraphError::UnknownRelationLabel { line, label })?;
        let weight: f64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| malformed(Source::Edges, line, "bad weight"))?;
        if !(weight.is_finite() && weight > 0.0) {
            return Err(GraphError::NonPositiveWeight { line, weight });
        }
        out.push(Edge {
            head,
            tail,
            relation,
            weight,
        });
    }
    Ok(out)
}
