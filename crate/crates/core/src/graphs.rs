//! Byte-level traffic graphs.
//!
//! A packet segment (header or payload) becomes an undirected graph whose
//! nodes are the distinct byte values of the segment and whose edges join
//! value pairs with strictly positive point-wise mutual information, where
//! the probabilities are estimated from sliding-window co-occurrence.
//!
//! Windowing convention: windows of length `w` start at positions
//! `0..=n-w`; a sequence shorter than `w` contributes a single window
//! covering the whole sequence. Within a window, a value pair counts once
//! regardless of how many times it repeats.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ingest::CleanPacket;

/// Default co-occurrence window.
pub const DEFAULT_PMI_WINDOW: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("cannot build a graph from an empty byte sequence")]
    EmptySequence,
    #[error("co-occurrence window must be at least 2, got {0}")]
    InvalidWindow(usize),
    #[error("byte {0:#04x} does not occur in the sequence")]
    UnknownByte(u8),
    #[error("pmi is only defined for two distinct bytes (got {0:#04x} twice)")]
    SameByte(u8),
    #[error("packet has an empty {0} segment")]
    EmptySegment(Origin),
}

/// Which packet segment a graph was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Header,
    Payload,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Origin::Header => f.write_str("header"),
            Origin::Payload => f.write_str("payload"),
        }
    }
}

/// Undirected graph over distinct byte values.
///
/// Edges are stored once, as `(i, j)` with `i < j`, sorted. Indices refer to
/// positions in `nodes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficGraph {
    nodes: Vec<u8>,
    edges: Vec<(u16, u16)>,
    origin: Origin,
}

impl TrafficGraph {
    /// Builds a graph from explicit parts, normalizing edge orientation and
    /// order. Rejects self-loops, duplicate node values and out-of-range
    /// endpoints.
    pub fn from_parts(
        nodes: Vec<u8>,
        edges: impl IntoIterator<Item = (u16, u16)>,
        origin: Origin,
    ) -> Result<Self, String> {
        let mut seen = [false; 256];
        for &v in &nodes {
            if std::mem::replace(&mut seen[v as usize], true) {
                return Err(format!("duplicate node value {v:#04x}"));
            }
        }
        let n = nodes.len();
        let mut out = Vec::new();
        for (a, b) in edges {
            if a == b {
                return Err(format!("self-loop on node {a}"));
            }
            if a as usize >= n || b as usize >= n {
                return Err(format!("edge ({a}, {b}) out of range for {n} nodes"));
            }
            out.push((a.min(b), a.max(b)));
        }
        out.sort_unstable();
        out.dedup();
        Ok(Self {
            nodes,
            edges: out,
            origin,
        })
    }

    pub fn nodes(&self) -> &[u8] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(u16, u16)] {
        &self.edges
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adjacency lists indexed by node position; neighbors ascending.
    pub fn adjacency(&self) -> Vec<Vec<u16>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Checks every structural invariant. Used by tests and by the dataset
    /// reader.
    pub fn validate(&self) -> Result<(), String> {
        Self::from_parts(self.nodes.clone(), self.edges.iter().copied(), self.origin).and_then(
            |g| {
                if g.edges == self.edges {
                    Ok(())
                } else {
                    Err("edges are not normalized".into())
                }
            },
        )
    }

    pub(crate) fn from_sorted_unchecked(nodes: Vec<u8>, edges: Vec<(u16, u16)>, origin: Origin) -> Self {
        debug_assert!(edges.windows(2).all(|w| w[0] < w[1]));
        Self {
            nodes,
            edges,
            origin,
        }
    }
}

/// Windowed co-occurrence counts for one byte sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CooccurrenceStats {
    /// Keyed by `(a, b)` with `a < b`; lookups through [`Self::pair`] are
    /// symmetric.
    pair_counts: BTreeMap<(u8, u8), u64>,
    unigram_counts: [u64; 256],
    total_windows: u64,
}

impl CooccurrenceStats {
    pub fn pair(&self, a: u8, b: u8) -> u64 {
        let key = (a.min(b), a.max(b));
        self.pair_counts.get(&key).copied().unwrap_or(0)
    }

    pub fn unigram(&self, a: u8) -> u64 {
        self.unigram_counts[a as usize]
    }

    pub fn total_windows(&self) -> u64 {
        self.total_windows
    }

    /// Nonzero pair counts as `((a, b), count)` with `a < b`.
    pub fn pairs(&self) -> impl Iterator<Item = ((u8, u8), u64)> + '_ {
        self.pair_counts.iter().map(|(&k, &v)| (k, v))
    }

    /// `pmi(a, b) > 0`, decided in exact integer arithmetic:
    /// `pair * total > uni_a * uni_b`.
    pub fn positive_association(&self, a: u8, b: u8) -> bool {
        let pair = self.pair(a, b) as u128;
        pair > 0
            && pair * self.total_windows as u128
                > self.unigram(a) as u128 * self.unigram(b) as u128
    }
}

pub fn count_cooccurrence(bytes: &[u8], window: usize) -> Result<CooccurrenceStats, GraphError> {
    if bytes.is_empty() {
        return Err(GraphError::EmptySequence);
    }
    if window < 2 {
        return Err(GraphError::InvalidWindow(window));
    }
    let span = window.min(bytes.len());
    let total_windows = bytes.len() - span + 1;

    let mut pair_counts = BTreeMap::new();
    let mut unigram_counts = [0u64; 256];
    let mut distinct: Vec<u8> = Vec::with_capacity(span);
    for win in bytes.windows(span) {
        distinct.clear();
        for &b in win {
            if !distinct.contains(&b) {
                distinct.push(b);
            }
        }
        distinct.sort_unstable();
        for (i, &a) in distinct.iter().enumerate() {
            unigram_counts[a as usize] += 1;
            for &b in &distinct[i + 1..] {
                *pair_counts.entry((a, b)).or_insert(0) += 1;
            }
        }
    }

    Ok(CooccurrenceStats {
        pair_counts,
        unigram_counts,
        total_windows: total_windows as u64,
    })
}

/// Point-wise mutual information of two distinct bytes; `-inf` when they
/// never share a window.
pub fn pmi(stats: &CooccurrenceStats, a: u8, b: u8) -> Result<f64, GraphError> {
    if a == b {
        return Err(GraphError::SameByte(a));
    }
    for x in [a, b] {
        if stats.unigram(x) == 0 {
            return Err(GraphError::UnknownByte(x));
        }
    }
    let pair = stats.pair(a, b);
    if pair == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let total = stats.total_windows as f64;
    let p_ab = pair as f64 / total;
    let p_a = stats.unigram(a) as f64 / total;
    let p_b = stats.unigram(b) as f64 / total;
    Ok((p_ab / (p_a * p_b)).ln())
}

pub fn build_graph(bytes: &[u8], window: usize, origin: Origin) -> Result<TrafficGraph, GraphError> {
    let stats = count_cooccurrence(bytes, window)?;

    let mut index = [u16::MAX; 256];
    let mut nodes = Vec::new();
    for &b in bytes {
        if index[b as usize] == u16::MAX {
            index[b as usize] = nodes.len() as u16;
            nodes.push(b);
        }
    }

    let mut edges: Vec<(u16, u16)> = stats
        .pairs()
        .filter(|&((a, b), _)| stats.positive_association(a, b))
        .map(|((a, b), _)| {
            let (i, j) = (index[a as usize], index[b as usize]);
            (i.min(j), i.max(j))
        })
        .collect();
    edges.sort_unstable();

    Ok(TrafficGraph::from_sorted_unchecked(nodes, edges, origin))
}

/// Header and payload graphs of one packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketGraphs {
    pub header: TrafficGraph,
    pub payload: TrafficGraph,
}

pub fn build_packet_graphs(packet: &CleanPacket, window: usize) -> Result<PacketGraphs, GraphError> {
    if packet.header_bytes.is_empty() {
        return Err(GraphError::EmptySegment(Origin::Header));
    }
    if packet.payload_bytes.is_empty() {
        return Err(GraphError::EmptySegment(Origin::Payload));
    }
    Ok(PacketGraphs {
        header: build_graph(&packet.header_bytes, window, Origin::Header)?,
        payload: build_graph(&packet.payload_bytes, window, Origin::Payload)?,
    })
}
