//! Stochastic views: node and edge dropping on traffic graphs, packet
//! dropping on flows.
//!
//! Every probability here is a drop probability. When a draw would remove
//! every node (or packet), one uniformly chosen element survives so that
//! the encoders always see nonempty input.

use rand::Rng;

use crate::graphs::TrafficGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub p_node_drop: f64,
    pub p_edge_drop: f64,
    pub p_packet_drop: f64,
    pub augment_header: bool,
    pub augment_payload: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_node_drop: 0.1,
            p_edge_drop: 0.05,
            p_packet_drop: 0.6,
            augment_header: true,
            augment_payload: true,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("p_node_drop", self.p_node_drop),
            ("p_edge_drop", self.p_edge_drop),
            ("p_packet_drop", self.p_packet_drop),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }
}

fn bernoulli_keep<R: Rng + ?Sized>(n: usize, p_drop: f64, rng: &mut R) -> Vec<bool> {
    let mut keep: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= p_drop).collect();
    if n > 0 && !keep.iter().any(|&k| k) {
        keep[rng.gen_range(0..n)] = true;
    }
    keep
}

/// Drops each node with probability `p` together with its edges. Survivors
/// keep their relative order and are re-indexed.
pub fn drop_nodes<R: Rng + ?Sized>(graph: &TrafficGraph, p: f64, rng: &mut R) -> TrafficGraph {
    let keep = bernoulli_keep(graph.node_count(), p, rng);
    let mut remap = vec![u16::MAX; keep.len()];
    let mut nodes = Vec::new();
    for (i, (&value, &k)) in graph.nodes().iter().zip(&keep).enumerate() {
        if k {
            remap[i] = nodes.len() as u16;
            nodes.push(value);
        }
    }
    // Remapping is monotone, so the sorted (i < j) edge order is preserved.
    let edges = graph
        .edges()
        .iter()
        .filter(|&&(a, b)| keep[a as usize] && keep[b as usize])
        .map(|&(a, b)| (remap[a as usize], remap[b as usize]))
        .collect();
    TrafficGraph::from_sorted_unchecked(nodes, edges, graph.origin())
}

/// Drops each edge with probability `p`; nodes are untouched.
pub fn drop_edges<R: Rng + ?Sized>(graph: &TrafficGraph, p: f64, rng: &mut R) -> TrafficGraph {
    let edges = graph
        .edges()
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() >= p)
        .collect();
    TrafficGraph::from_sorted_unchecked(graph.nodes().to_vec(), edges, graph.origin())
}

/// Augmented (header, payload) pair: node dropping then edge dropping on each
/// graph whose flag is set.
pub fn make_packet_view<R: Rng + ?Sized>(
    header: &TrafficGraph,
    payload: &TrafficGraph,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (TrafficGraph, TrafficGraph) {
    let mut view = |g: &TrafficGraph, on: bool| {
        if on {
            let g = drop_nodes(g, cfg.p_node_drop, rng);
            drop_edges(&g, cfg.p_edge_drop, rng)
        } else {
            g.clone()
        }
    };
    let h = view(header, cfg.augment_header);
    let p = view(payload, cfg.augment_payload);
    (h, p)
}

/// Keep-mask over a flow of `n` packets; dropped packets are removed from
/// the sequence fed to the flow encoder.
pub fn drop_packets<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<bool> {
    assert!(n >= 1, "flow must contain at least one packet");
    bernoulli_keep(n, p, rng)
}
