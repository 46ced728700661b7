//! The multi-task objective of one micro-batch: classification losses on
//! anchor embeddings and contrastive losses over anchor/augmented pairs at
//! packet and flow level.

use ndarray::Array2;

use super::TrainError;
use crate::augment::{drop_packets, make_packet_view, AugmentConfig};
use crate::graphs::{PacketGraphs, TrafficGraph};
use crate::losses::{
    contrastive_loss_with_grad, cross_entropy_with_grad, total_loss, ContrastiveBatch, LossSwitches, LossTerms,
    LossWeights,
};
use crate::model::forward::{dropout, encode_flows, encode_packets, head, Dropout, GraphBatch};
use crate::model::tape::{Tape, Var};
use crate::model::{ModelParams, ParamGrads};
use crate::rng::{stream, Rng};

/// A flow as the objective sees it: label and per-packet graphs.
#[derive(Debug, Clone, Copy)]
pub struct FlowInput<'a> {
    pub label: usize,
    pub graphs: &'a [PacketGraphs],
}

/// Augmented graphs for every packet, plus the packets kept in each
/// augmented flow.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedViews {
    pub headers: Vec<TrafficGraph>,
    pub payloads: Vec<TrafficGraph>,
    /// Per flow, rows into the augmented packet list.
    pub kept: Vec<Vec<u32>>,
}

impl AugmentedViews {
    /// Packet views first (flow by flow, packet by packet), then the
    /// packet-drop masks, all from one stream.
    pub fn sample(flows: &[FlowInput<'_>], cfg: &AugmentConfig, rng: &mut Rng) -> Self {
        let mut headers = Vec::new();
        let mut payloads = Vec::new();
        for f in flows {
            for g in f.graphs {
                let (h, p) = make_packet_view(&g.header, &g.payload, cfg, rng);
                headers.push(h);
                payloads.push(p);
            }
        }
        let mut kept = Vec::with_capacity(flows.len());
        let mut base = 0u32;
        for f in flows {
            let mask = drop_packets(f.graphs.len(), cfg.p_packet_drop, rng);
            kept.push(
                mask.iter()
                    .enumerate()
                    .filter(|(_, &k)| k)
                    .map(|(i, _)| base + i as u32)
                    .collect(),
            );
            base += f.graphs.len() as u32;
        }
        Self {
            headers,
            payloads,
            kept,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainBatch<'a> {
    pub flows: Vec<FlowInput<'a>>,
    pub views: Option<AugmentedViews>,
    /// Seed of the dropout masks of this batch.
    pub dropout_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub weights: LossWeights,
    pub switches: LossSwitches,
    pub temperature: f64,
    pub label_smoothing: f64,
    pub unsupervised_cl: bool,
    pub gnn_dropout: f64,
    pub lstm_dropout: f64,
}

impl ObjectiveSettings {
    /// Terms that take part: switched on and, for contrastive terms, with
    /// a nonzero weight.
    pub fn active(&self) -> LossSwitches {
        LossSwitches {
            packet_cls: self.switches.packet_cls,
            flow_cls: self.switches.flow_cls,
            packet_cl: self.switches.packet_cl && self.weights.alpha != 0.0,
            flow_cl: self.switches.flow_cl && self.weights.beta != 0.0,
        }
    }

    pub fn needs_views(&self) -> bool {
        let a = self.active();
        a.packet_cl || a.flow_cl
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    /// Inactive terms are reported as 0.
    pub terms: LossTerms,
    pub total: f64,
    pub grads: Option<ParamGrads>,
}

fn mean_cross_entropy(
    tape: &mut Tape<'_>,
    logits: Var,
    labels: &[usize],
    smoothing: f64,
) -> Result<(Var, f64), TrainError> {
    let values = tape.value(logits);
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(values.raw_dim());
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = values.row(i).to_vec();
        let (loss, g) = cross_entropy_with_grad(&row, label, smoothing)?;
        total += loss;
        for (c, gc) in g.into_iter().enumerate() {
            grad[[i, c]] = gc / n;
        }
    }
    let mean = total / n;
    Ok((tape.loss(logits, mean, grad), mean))
}

/// Contrastive loss over `[anchor; augmented]`, divided by the row count.
fn contrastive_term(
    tape: &mut Tape<'_>,
    anchor: Var,
    augmented: Var,
    labels: &[usize],
    settings: &ObjectiveSettings,
) -> Result<(Var, f64), TrainError> {
    let stacked = tape.concat_rows(vec![anchor, augmented]);
    let z = tape.normalize_rows(stacked)?;
    let mut all_labels = labels.to_vec();
    all_labels.extend_from_slice(labels);
    let batch = ContrastiveBatch::new(tape.value(z).to_owned(), all_labels, settings.temperature)?;
    let (sum, mut grad) = contrastive_loss_with_grad(&batch, !settings.unsupervised_cl);
    let rows = batch.len() as f64;
    grad /= rows;
    let mean = sum / rows;
    Ok((tape.loss(z, mean, grad), mean))
}

/// Evaluates the objective and, if asked, its gradient.
pub fn evaluate_objective(
    params: &ModelParams,
    batch: &TrainBatch<'_>,
    settings: &ObjectiveSettings,
    with_grad: bool,
) -> Result<ObjectiveOutput, TrainError> {
    let active = settings.active();
    let flows = &batch.flows;
    let flow_labels: Vec<usize> = flows.iter().map(|f| f.label).collect();
    let packet_labels: Vec<usize> = flows
        .iter()
        .flat_map(|f| std::iter::repeat(f.label).take(f.graphs.len()))
        .collect();
    let anchor_rows: Vec<Vec<u32>> = {
        let mut base = 0u32;
        flows
            .iter()
            .map(|f| {
                let rows = (base..base + f.graphs.len() as u32).collect();
                base += f.graphs.len() as u32;
                rows
            })
            .collect()
    };

    let mut gnn_drop = (settings.gnn_dropout > 0.0).then(|| Dropout {
        p: settings.gnn_dropout,
        rng: stream(batch.dropout_seed, &[0]),
    });
    let mut lstm_drop = (settings.lstm_dropout > 0.0).then(|| Dropout {
        p: settings.lstm_dropout,
        rng: stream(batch.dropout_seed, &[1]),
    });

    let mut tape = Tape::new(params);
    let headers = GraphBatch::new(flows.iter().flat_map(|f| f.graphs.iter().map(|g| &g.header)))?;
    let payloads = GraphBatch::new(flows.iter().flat_map(|f| f.graphs.iter().map(|g| &g.payload)))?;
    let p = encode_packets(&mut tape, &headers, &payloads, &mut gnn_drop);
    let need_flow = active.flow_cls || active.flow_cl;
    let f = need_flow.then(|| {
        let f = encode_flows(&mut tape, p, &anchor_rows);
        dropout(&mut tape, f, &mut lstm_drop)
    });

    let mut terms = LossTerms::default();
    let mut parts: Vec<(Var, f64)> = Vec::new();
    let layout = params.layout();
    if active.packet_cls {
        let logits = head(&mut tape, layout.packet_head, p);
        let (v, value) = mean_cross_entropy(&mut tape, logits, &packet_labels, settings.label_smoothing)?;
        terms.packet_cls = value;
        parts.push((v, 1.0));
    }
    if active.flow_cls {
        let logits = head(&mut tape, layout.flow_head, f.expect("flow vectors"));
        let (v, value) = mean_cross_entropy(&mut tape, logits, &flow_labels, settings.label_smoothing)?;
        terms.flow_cls = value;
        parts.push((v, 1.0));
    }
    if settings.needs_views() {
        let views = batch.views.as_ref().ok_or(TrainError::MissingViews)?;
        let aug_headers = GraphBatch::new(&views.headers)?;
        let aug_payloads = GraphBatch::new(&views.payloads)?;
        let pa = encode_packets(&mut tape, &aug_headers, &aug_payloads, &mut gnn_drop);
        // A contrastive batch needs at least two samples per view.
        if active.packet_cl && packet_labels.len() >= 2 {
            let (v, value) = contrastive_term(&mut tape, p, pa, &packet_labels, settings)?;
            terms.packet_cl = value;
            parts.push((v, settings.weights.alpha));
        }
        if active.flow_cl && flows.len() >= 2 {
            let fa = encode_flows(&mut tape, pa, &views.kept);
            let fa = dropout(&mut tape, fa, &mut lstm_drop);
            let (v, value) = contrastive_term(&mut tape, f.expect("flow vectors"), fa, &flow_labels, settings)?;
            terms.flow_cl = value;
            parts.push((v, settings.weights.beta));
        }
    }

    let total = total_loss(&terms, &settings.weights, &active)?;
    let grads = if with_grad && !parts.is_empty() {
        let root = tape.weighted_sum(parts);
        Some(tape.backward(root)?)
    } else if with_grad {
        Some(ParamGrads::zeros_like(params))
    } else {
        None
    };
    Ok(ObjectiveOutput { terms, total, grads })
}
