//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance harness.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::Rng as _;
use tgcl_core::augment::AugmentConfig;
use tgcl_core::graphs::{build_graph, Origin, PacketGraphs, TrafficGraph};
use tgcl_core::losses::{LossSwitches, LossWeights};
use tgcl_core::rng::stream;
use tgcl_core::train::{evaluate_objective, AugmentedViews, FlowInput, ObjectiveSettings, TrainBatch};
use tgcl_core::{Dataset, ModelDims, ModelParams, Split};

/// Graph straight from the definition: node values in first-appearance
/// order and edges as `(low, high)` value pairs with `p(a,b) > p(a)p(b)`.
pub fn oracle_graph(bytes: &[u8], window: usize) -> (Vec<u8>, BTreeSet<(u8, u8)>) {
    let mut nodes = Vec::new();
    for &b in bytes {
        if !nodes.contains(&b) {
            nodes.push(b);
        }
    }
    let w = window.min(bytes.len());
    let mut unigram: BTreeMap<u8, u128> = BTreeMap::new();
    let mut pairs: BTreeMap<(u8, u8), u128> = BTreeMap::new();
    let mut total: u128 = 0;
    let mut start = 0;
    while start + w <= bytes.len() {
        total += 1;
        let win = &bytes[start..start + w];
        let mut seen_values = BTreeSet::new();
        let mut seen_pairs = BTreeSet::new();
        for i in 0..w {
            seen_values.insert(win[i]);
            for j in 0..w {
                if i != j && win[i] < win[j] {
                    seen_pairs.insert((win[i], win[j]));
                }
            }
        }
        for v in seen_values {
            *unigram.entry(v).or_default() += 1;
        }
        for p in seen_pairs {
            *pairs.entry(p).or_default() += 1;
        }
        start += 1;
    }
    // pmi > 0  <=>  (c_ab / T) > (c_a / T)(c_b / T)  <=>  c_ab * T > c_a * c_b
    let edges = pairs
        .into_iter()
        .filter(|&((a, b), c)| c * total > unigram[&a] * unigram[&b])
        .map(|(p, _)| p)
        .collect();
    (nodes, edges)
}

/// The library graph in the oracle's terms.
pub fn graph_as_values(g: &TrafficGraph) -> (Vec<u8>, BTreeSet<(u8, u8)>) {
    let nodes = g.nodes().to_vec();
    let edges = g
        .edges()
        .iter()
        .map(|&(i, j)| {
            let (a, b) = (nodes[i as usize], nodes[j as usize]);
            (a.min(b), a.max(b))
        })
        .collect();
    (nodes, edges)
}

/// Contrastive loss as the literal double sum over anchors and positives,
/// with `2N` rows where row `i` pairs with row `(i + N) mod 2N`.
pub fn oracle_contrastive(z: &[Vec<f64>], labels: &[usize], tau: f64, supervised: bool) -> f64 {
    let n2 = z.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut loss = 0.0;
    for i in 0..n2 {
        let positives: Vec<usize> = if supervised {
            (0..n2).filter(|&m| m != i && labels[m] == labels[i]).collect()
        } else {
            vec![(i + n2 / 2) % n2]
        };
        let denom: f64 = (0..n2)
            .filter(|&k| k != i)
            .map(|k| (dot(&z[i], &z[k]) / tau).exp())
            .sum();
        let mut inner = 0.0;
        for &m in &positives {
            inner += ((dot(&z[i], &z[m]) / tau).exp() / denom).ln();
        }
        loss += -inner / positives.len() as f64;
    }
    loss
}

/// Random unit vectors for `n` samples in two views, with labels drawn
/// from `classes` categories (shared by both views of a sample).
pub fn random_contrastive_batch(seed: u64, n: usize, dim: usize, classes: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = stream(seed, &[0xc0]);
    let mut rows = Vec::with_capacity(2 * n);
    for _ in 0..2 * n {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-3 {
                rows.push(v.into_iter().map(|x| x / norm).collect());
                break;
            }
        }
    }
    let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    labels.extend_from_within(..);
    (rows, labels)
}

pub fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j])
}

/// Two flows of two or three small random packets, augmented views with
/// fixed masks, and randomized parameters of a width-3 model.
pub struct MicroModel {
    pub params: ModelParams,
    pub flows: Vec<(usize, Vec<PacketGraphs>)>,
    pub views: AugmentedViews,
    pub settings: ObjectiveSettings,
    pub dropout_seed: u64,
}

fn random_graph(rng: &mut tgcl_core::rng::Rng, len: std::ops::Range<usize>, values: u8, origin: Origin) -> TrafficGraph {
    let n = rng.gen_range(len);
    let bytes: Vec<u8> = (0..n).map(|_| rng.gen_range(0..values)).collect();
    build_graph(&bytes, 5, origin).expect("nonempty bytes")
}

impl MicroModel {
    pub fn new(seed: u64) -> Self {
        Self::draw(seed, 0)
    }

    /// The `draw`-th independent micro-model for `seed`.
    pub fn draw(seed: u64, draw: u64) -> Self {
        let mut rng = stream(seed, &[0x3c, draw]);
        let flows = (0..2)
            .map(|label| {
                let packets = (0..rng.gen_range(2..=3))
                    .map(|_| PacketGraphs {
                        header: random_graph(&mut rng, 8..15, 20, Origin::Header),
                        payload: random_graph(&mut rng, 6..25, 30, Origin::Payload),
                    })
                    .collect();
                (label, packets)
            })
            .collect::<Vec<(usize, Vec<PacketGraphs>)>>();

        let mut params = ModelParams::init(ModelDims::uniform(3, 2), seed).expect("valid dims");
        let names: Vec<String> = params.specs().iter().map(|s| s.name.clone()).collect();
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            let slope = name.ends_with("prelu");
            t.mapv_inplace(|_| {
                if slope {
                    rng.gen_range(0.1..0.4)
                } else {
                    rng.gen_range(-0.6..0.6)
                }
            });
        }

        let augment = AugmentConfig {
            p_node_drop: 0.2,
            p_edge_drop: 0.2,
            p_packet_drop: 0.4,
            ..AugmentConfig::default()
        };
        let inputs: Vec<FlowInput<'_>> = flows
            .iter()
            .map(|(label, graphs)| FlowInput {
                label: *label,
                graphs,
            })
            .collect();
        let views = AugmentedViews::sample(&inputs, &augment, &mut rng);
        drop(inputs);

        Self {
            params,
            flows,
            views,
            settings: ObjectiveSettings {
                weights: LossWeights { alpha: 0.7, beta: 0.6 },
                switches: LossSwitches::default(),
                temperature: 0.2,
                label_smoothing: 0.1,
                unsupervised_cl: false,
                gnn_dropout: 0.2,
                lstm_dropout: 0.1,
            },
            dropout_seed: seed ^ 0xd0,
        }
    }

    pub fn batch(&self) -> TrainBatch<'_> {
        TrainBatch {
            flows: self
                .flows
                .iter()
                .map(|(label, graphs)| FlowInput {
                    label: *label,
                    graphs,
                })
                .collect(),
            views: Some(self.views.clone()),
            dropout_seed: self.dropout_seed,
        }
    }

    pub fn loss(&self, params: &ModelParams) -> f64 {
        evaluate_objective(params, &self.batch(), &self.settings, false)
            .expect("objective")
            .total
    }
}

/// Outcome of the finite-difference check of one parameter group.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    pub analytic_norm: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|)`, 0 when both vanish.
    pub relative_error: f64,
    /// The same measure between the numeric gradients at `FD_STEP` and
    /// `FD_STEP / 10`. Large values mean a PReLU kink lies within the step.
    pub step_disagreement: f64,
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-3;
/// Largest `step_disagreement` for which a point counts as smooth.
pub const SMOOTHNESS_TOLERANCE: f64 = 1e-5;

fn norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&(a - b)) / scale
    }
}

/// Central differences over every scalar of every parameter group.
pub fn gradient_check(model: &MicroModel) -> Vec<GroupCheck> {
    let out = evaluate_objective(&model.params, &model.batch(), &model.settings, true).expect("objective");
    let grads = out.grads.expect("gradient requested");
    let mut params = model.params.clone();
    let mut checks = Vec::new();
    for g in 0..params.len() {
        let analytic = grads.tensors()[g].clone();
        let mut numeric = |h: f64| {
            let mut fd = Array2::<f64>::zeros(analytic.raw_dim());
            for idx in 0..analytic.len() {
                let at = [idx / analytic.ncols(), idx % analytic.ncols()];
                let orig = params.tensors()[g][at];
                params.tensors_mut()[g][at] = orig + h;
                let up = model.loss(&params);
                params.tensors_mut()[g][at] = orig - h;
                let down = model.loss(&params);
                params.tensors_mut()[g][at] = orig;
                fd[at] = (up - down) / (2.0 * h);
            }
            fd
        };
        let coarse = numeric(FD_STEP);
        let fine = numeric(FD_STEP / 10.0);
        checks.push(GroupCheck {
            name: params.specs()[g].name.clone(),
            analytic_norm: norm(&analytic),
            relative_error: relative(&analytic, &coarse),
            step_disagreement: relative(&coarse, &fine),
        });
    }
    checks
}

/// Gradient check of the first draw for `seed` whose loss is smooth within
/// `FD_STEP` of the drawn point, with the number of draws rejected.
/// `configure` adjusts each draw before checking.
pub fn smooth_gradient_check(seed: u64, configure: fn(&mut MicroModel)) -> (u64, Vec<GroupCheck>) {
    for draw in 0..32 {
        let mut model = MicroModel::draw(seed, draw);
        configure(&mut model);
        let checks = gradient_check(&model);
        if checks.iter().all(|c| c.step_disagreement <= SMOOTHNESS_TOLERANCE) {
            return (draw, checks);
        }
    }
    panic!("no smooth micro-model for seed {seed}");
}

/// Normalized byte histogram over the header and payload bytes of a flow.
pub fn byte_histogram(ds: &Dataset, flow: usize) -> Vec<f64> {
    let mut h = vec![0.0; 256];
    let mut total = 0.0;
    for p in &ds.flows[flow].packets {
        for &b in p.header_bytes.iter().chain(&p.payload_bytes) {
            h[b as usize] += 1.0;
            total += 1.0;
        }
    }
    h.iter_mut().for_each(|x| *x /= total);
    h
}

/// Multinomial logistic regression on byte histograms, fitted on the train
/// split by full-batch gradient descent; returns test-split macro-F1.
pub fn logistic_baseline_f1(ds: &Dataset) -> f64 {
    let classes = ds.num_classes();
    let train = ds.indices(Split::Train);
    let test = ds.indices(Split::Test);
    let features = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| byte_histogram(ds, i)).collect() };
    let (xtr, xte) = (features(&train), features(&test));
    let ytr: Vec<usize> = train.iter().map(|&i| ds.flows[i].label as usize).collect();
    let yte: Vec<usize> = test.iter().map(|&i| ds.flows[i].label as usize).collect();

    let mut w = vec![vec![0.0; 257]; classes];
    let scores = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|wc| wc[256] + wc[..256].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    let lr = 5.0;
    for _ in 0..500 {
        let mut grad = vec![vec![0.0; 257]; classes];
        for (x, &y) in xtr.iter().zip(&ytr) {
            let s = scores(&w, x);
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - max).exp()).sum();
            for c in 0..classes {
                let p = (s[c] - max).exp() / z - if c == y { 1.0 } else { 0.0 };
                for k in 0..256 {
                    grad[c][k] += p * x[k];
                }
                grad[c][256] += p;
            }
        }
        for c in 0..classes {
            for k in 0..257 {
                w[c][k] -= lr * grad[c][k] / xtr.len() as f64;
            }
        }
    }
    let predicted: Vec<usize> = xte
        .iter()
        .map(|x| {
            let s = scores(&w, x);
            (0..classes).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap()
        })
        .collect();
    macro_f1(&yte, &predicted, classes)
}

/// Macro-F1 by direct counting; classes never predicted score 0.
pub fn macro_f1(truth: &[usize], predicted: &[usize], classes: usize) -> f64 {
    let mut sum = 0.0;
    for c in 0..classes {
        let tp = truth.iter().zip(predicted).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let fp = truth.iter().zip(predicted).filter(|&(&t, &p)| t != c && p == c).count() as f64;
        let fn_ = truth.iter().zip(predicted).filter(|&(&t, &p)| t == c && p != c).count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        sum += if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    sum / classes as f64
}

/// Parses an embedding export into `(label, vector)` rows.
pub fn parse_export(text: &str) -> Vec<(String, Vec<f64>)> {
    text.lines()
        .map(|line| {
            let mut cols = line.split('\t');
            let label = cols.next().expect("label column").to_string();
            let v = cols.map(|c| c.parse().expect("decimal value")).collect();
            (label, v)
        })
        .collect()
}

/// Fraction of `query` rows whose nearest class centroid (computed from
/// `reference`) names the same class as `predicted`.
pub fn centroid_agreement(reference: &[(String, Vec<f64>)], query: &[(String, Vec<f64>)], names: &[String], predicted: &[usize]) -> f64 {
    let dim = reference[0].1.len();
    let mut centroids = vec![vec![0.0; dim]; names.len()];
    let mut counts = vec![0.0f64; names.len()];
    for (label, v) in reference {
        let c = names.iter().position(|n| n == label).expect("known label");
        counts[c] += 1.0;
        for (a, b) in centroids[c].iter_mut().zip(v) {
            *a += b;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|x| *x /= n.max(1.0));
    }
    let agree = query
        .iter()
        .zip(predicted)
        .filter(|((_, v), &p)| {
            let dist = |c: &[f64]| c.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let nearest = (0..names.len())
                .filter(|&c| counts[c] > 0.0)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            nearest == p
        })
        .count();
    agree as f64 / query.len() as f64
}

/// Observed drop count of one augmentation against its binomial law.
#[derive(Debug, Clone)]
pub struct DropStatistic {
    pub name: &'static str,
    pub observed: f64,
    pub mean: f64,
    pub sigma: f64,
}

impl DropStatistic {
    fn binomial(name: &'static str, observed: usize, trials: usize, p: f64) -> Self {
        let n = trials as f64;
        Self {
            name,
            observed: observed as f64,
            mean: n * p,
            sigma: (n * p * (1.0 - p)).sqrt(),
        }
    }

    pub fn z_score(&self) -> f64 {
        (self.observed - self.mean) / self.sigma
    }
}

/// A connected 40-node graph: a ring plus chords.
pub fn statistics_graph() -> TrafficGraph {
    let n = 40u16;
    let ring = (0..n).map(|i| (i, (i + 1) % n));
    let chords = (0..n / 2).map(|i| (i, i + n / 2));
    TrafficGraph::from_parts((0..n).map(|v| v as u8 * 3).collect(), ring.chain(chords), Origin::Payload)
        .expect("valid graph")
}

/// Runs `trials` independent draws of node dropping, edge dropping and
/// packet dropping (on a 15-packet flow) and tallies the drops.
pub fn augmentation_statistics(trials: usize, cfg: &AugmentConfig, seed: u64) -> Vec<DropStatistic> {
    use tgcl_core::augment::{drop_edges, drop_nodes, drop_packets};
    const FLOW: usize = 15;
    let graph = statistics_graph();
    let mut rng = stream(seed, &[0xa0]);
    let (mut nodes, mut edges, mut packets) = (0, 0, 0);
    for _ in 0..trials {
        nodes += graph.node_count() - drop_nodes(&graph, cfg.p_node_drop, &mut rng).node_count();
        edges += graph.edge_count() - drop_edges(&graph, cfg.p_edge_drop, &mut rng).edge_count();
        packets += drop_packets(FLOW, cfg.p_packet_drop, &mut rng).iter().filter(|&&k| !k).count();
    }
    vec![
        DropStatistic::binomial("node drop", nodes, trials * graph.node_count(), cfg.p_node_drop),
        DropStatistic::binomial("edge drop", edges, trials * graph.edge_count(), cfg.p_edge_drop),
        DropStatistic::binomial("packet drop", packets, trials * FLOW, cfg.p_packet_drop),
    ]
}

/// Structural checks of an augmented graph against its source: valid
/// structure, at least one node, node values a subsequence of the source's
/// and every edge present in the source.
pub fn check_view(source: &TrafficGraph, view: &TrafficGraph) -> Result<(), String> {
    view.validate()?;
    if view.is_empty() {
        return Err("augmented graph has no nodes".into());
    }
    if view.origin() != source.origin() {
        return Err("origin changed".into());
    }
    let mut it = source.nodes().iter();
    for v in view.nodes() {
        if !it.any(|s| s == v) {
            return Err(format!("node {v} is not in source order"));
        }
    }
    let (_, source_edges) = graph_as_values(source);
    let (_, view_edges) = graph_as_values(view);
    if !view_edges.is_subset(&source_edges) {
        return Err("augmented graph has an edge the source lacks".into());
    }
    Ok(())
}
