//! Batched forward passes recorded on a tape.
//!
//! Graphs of a batch are stacked into one disjoint union, so each encoder
//! layer is a handful of matrix products regardless of batch size. Flows
//! run through the LSTM together, longest first, shrinking the active set
//! as shorter flows end.

use std::rc::Rc;

use ndarray::{s, Array2};
use rand::Rng as _;

use super::tape::{Csr, Tape, Var};
use super::{HeadIds, ModelError, ModelParams};
use crate::dataset::DatasetFlow;
use crate::graphs::{Origin, TrafficGraph};
use crate::rng::Rng;

/// Disjoint union of graphs.
pub(crate) struct GraphBatch {
    bytes: Rc<[u32]>,
    adj: Rc<Csr>,
    offsets: Rc<[usize]>,
}

impl GraphBatch {
    pub fn new<'g>(graphs: impl IntoIterator<Item = &'g TrafficGraph>) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        let mut offsets = vec![0];
        let mut degree_lists: Vec<Vec<u32>> = Vec::new();
        for g in graphs {
            if g.is_empty() {
                return Err(ModelError::EmptyGraph);
            }
            let base = bytes.len() as u32;
            bytes.extend(g.nodes().iter().map(|&b| b as u32));
            degree_lists.extend((0..g.node_count()).map(|_| Vec::new()));
            for &(a, b) in g.edges() {
                let (a, b) = (base + a as u32, base + b as u32);
                degree_lists[a as usize].push(b);
                degree_lists[b as usize].push(a);
            }
            offsets.push(bytes.len());
        }
        let mut csr = Csr {
            offsets: Vec::with_capacity(bytes.len() + 1),
            neighbors: Vec::new(),
        };
        csr.offsets.push(0);
        for list in degree_lists {
            csr.neighbors.extend(list);
            csr.offsets.push(csr.neighbors.len());
        }
        Ok(Self {
            bytes: bytes.into(),
            adj: Rc::new(csr),
            offsets: offsets.into(),
        })
    }

    pub fn graph_count(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Inverted dropout with its own random stream.
pub(crate) struct Dropout {
    pub p: f64,
    pub rng: Rng,
}

pub(crate) fn dropout(tape: &mut Tape<'_>, x: Var, d: &mut Option<Dropout>) -> Var {
    let Some(d) = d else { return x };
    if d.p <= 0.0 {
        return x;
    }
    let keep = 1.0 / (1.0 - d.p);
    let shape = tape.value(x).dim();
    let mask = Array2::from_shape_simple_fn(shape, || if d.rng.gen::<f64>() < d.p { 0.0 } else { keep });
    tape.mask(x, mask)
}

/// One vector of width `H` per graph.
pub(crate) fn encode_graphs(
    tape: &mut Tape<'_>,
    origin: Origin,
    batch: &GraphBatch,
    drop: &mut Option<Dropout>,
) -> Var {
    let layout = tape.params().layout();
    let layers = layout.gnn(origin).to_vec();
    let embed = tape.param(layout.byte_embed);
    let mut h = None;
    for (k, ids) in layers.iter().enumerate() {
        let w_self = tape.param(ids.w_self);
        let w_neigh = tape.param(ids.w_neigh);
        let bias = tape.param(ids.bias);
        let slope = tape.param(ids.slope);
        let pre = match h {
            None => {
                // Transform the 256-row embedding table once, then look up.
                debug_assert_eq!(k, 0);
                let t_self = tape.linear(embed, w_self, None);
                let t_neigh = tape.linear(embed, w_neigh, None);
                let own = tape.gather(t_self, batch.bytes.clone());
                let nb = tape.gather(t_neigh, batch.bytes.clone());
                let nb = tape.neighbor_mean(nb, batch.adj.clone());
                let sum = tape.add(own, nb);
                tape.add_bias(sum, bias)
            }
            Some(prev) => {
                let own = tape.linear(prev, w_self, Some(bias));
                let mean = tape.neighbor_mean(prev, batch.adj.clone());
                let nb = tape.linear(mean, w_neigh, None);
                tape.add(own, nb)
            }
        };
        let act = tape.prelu(pre, slope);
        h = Some(dropout(tape, act, drop));
    }
    tape.segment_mean(h.expect("at least one layer"), batch.offsets.clone())
}

/// Packet vectors `W [h_header; h_payload] + b`, one row per packet.
pub(crate) fn encode_packets(
    tape: &mut Tape<'_>,
    headers: &GraphBatch,
    payloads: &GraphBatch,
    drop: &mut Option<Dropout>,
) -> Var {
    debug_assert_eq!(headers.graph_count(), payloads.graph_count());
    let h = encode_graphs(tape, Origin::Header, headers, drop);
    let p = encode_graphs(tape, Origin::Payload, payloads, drop);
    let both = tape.concat_cols(vec![h, p]);
    let layout = tape.params().layout();
    let (w, b) = (tape.param(layout.fusion_w), tape.param(layout.fusion_b));
    tape.linear(both, w, Some(b))
}

/// Final LSTM hidden state per flow; `flows[j]` lists the rows of
/// `packets` forming flow `j`, in order. Output row `j` belongs to flow `j`.
pub(crate) fn encode_flows(tape: &mut Tape<'_>, packets: Var, flows: &[Vec<u32>]) -> Var {
    assert!(flows.iter().all(|f| !f.is_empty()));
    let lstm = tape.params().layout().lstm;
    let width = tape.params().dims().flow;
    let w: Vec<Var> = lstm.w.iter().map(|&id| tape.param(id)).collect();
    let b: Vec<Var> = lstm.b.iter().map(|&id| tape.param(id)).collect();

    // Longest first (stable), so the active flows at step t are a prefix.
    let mut order: Vec<usize> = (0..flows.len()).collect();
    order.sort_by_key(|&j| std::cmp::Reverse(flows[j].len()));
    let steps = flows[order[0]].len();

    let mut h = tape.input(Array2::zeros((flows.len(), width)));
    let mut c = tape.input(Array2::zeros((flows.len(), width)));
    let mut active = flows.len();
    let mut finished: Vec<Var> = Vec::new();
    for t in 0..steps {
        let now = order.iter().take_while(|&&j| flows[j].len() > t).count();
        if now < active {
            let ended: Rc<[u32]> = (now as u32..active as u32).collect();
            finished.push(tape.gather(h, ended));
            let keep: Rc<[u32]> = (0..now as u32).collect();
            h = tape.gather(h, keep.clone());
            c = tape.gather(c, keep);
            active = now;
        }
        let rows: Rc<[u32]> = order[..active].iter().map(|&j| flows[j][t]).collect();
        let x = tape.gather(packets, rows);
        let xh = tape.concat_cols(vec![x, h]);
        let zi = tape.linear(xh, w[0], Some(b[0]));
        let zf = tape.linear(xh, w[1], Some(b[1]));
        let zg = tape.linear(xh, w[2], Some(b[2]));
        let zo = tape.linear(xh, w[3], Some(b[3]));
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let keep_c = tape.mul(f, c);
        let write = tape.mul(i, g);
        c = tape.add(keep_c, write);
        let tc = tape.tanh(c);
        h = tape.mul(o, tc);
    }
    finished.push(h);
    // Blocks were emitted shortest first; reversed, row r is flow order[r].
    finished.reverse();
    let sorted = if finished.len() == 1 {
        finished[0]
    } else {
        tape.concat_rows(finished)
    };
    let mut position = vec![0u32; flows.len()];
    for (r, &j) in order.iter().enumerate() {
        position[j] = r as u32;
    }
    if position.iter().enumerate().all(|(j, &r)| r as usize == j) {
        return sorted;
    }
    tape.gather(sorted, position.into())
}

/// `W2 PReLU(W1 x + b1) + b2`, row-wise.
pub(crate) fn head(tape: &mut Tape<'_>, ids: HeadIds, x: Var) -> Var {
    let w1 = tape.param(ids.w1);
    let b1 = tape.param(ids.b1);
    let w2 = tape.param(ids.w2);
    let b2 = tape.param(ids.b2);
    let slope = tape.param(ids.slope);
    let z = tape.linear(x, w1, Some(b1));
    let a = tape.prelu(z, slope);
    tape.linear(a, w2, Some(b2))
}

/// Anchor-view outputs of a batch of flows; packet rows are the flows'
/// packets concatenated in order.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    pub packet_embeddings: Array2<f64>,
    pub packet_logits: Array2<f64>,
    pub flow_embeddings: Array2<f64>,
    pub flow_logits: Array2<f64>,
}

/// Forward pass without augmentation or dropout, in chunks of
/// `chunk` flows.
pub fn infer_flows(params: &ModelParams, flows: &[&DatasetFlow], chunk: usize) -> Result<InferenceOutput, ModelError> {
    let d = params.dims();
    let packets: usize = flows.iter().map(|f| f.graphs.len()).sum();
    let mut out = InferenceOutput {
        packet_embeddings: Array2::zeros((packets, d.packet)),
        packet_logits: Array2::zeros((packets, d.classes)),
        flow_embeddings: Array2::zeros((flows.len(), d.flow)),
        flow_logits: Array2::zeros((flows.len(), d.classes)),
    };
    let mut prow = 0;
    for (ci, group) in flows.chunks(chunk.max(1)).enumerate() {
        if group.iter().any(|f| f.graphs.is_empty()) {
            return Err(ModelError::EmptySequence);
        }
        let headers = GraphBatch::new(group.iter().flat_map(|f| f.graphs.iter().map(|g| &g.header)))?;
        let payloads = GraphBatch::new(group.iter().flat_map(|f| f.graphs.iter().map(|g| &g.payload)))?;
        let mut rows = Vec::with_capacity(group.len());
        let mut next = 0u32;
        for f in group {
            rows.push((next..next + f.graphs.len() as u32).collect::<Vec<_>>());
            next += f.graphs.len() as u32;
        }
        let mut tape = Tape::new(params);
        let p = encode_packets(&mut tape, &headers, &payloads, &mut None);
        let f = encode_flows(&mut tape, p, &rows);
        let layout = params.layout();
        let pl = head(&mut tape, layout.packet_head, p);
        let fl = head(&mut tape, layout.flow_head, f);
        let n = next as usize;
        out.packet_embeddings.slice_mut(s![prow..prow + n, ..]).assign(&tape.value(p));
        out.packet_logits.slice_mut(s![prow..prow + n, ..]).assign(&tape.value(pl));
        let f0 = ci * chunk.max(1);
        let fr = f0..f0 + group.len();
        out.flow_embeddings.slice_mut(s![fr.clone(), ..]).assign(&tape.value(f));
        out.flow_logits.slice_mut(s![fr, ..]).assign(&tape.value(fl));
        prow += n;
    }
    Ok(out)
}
