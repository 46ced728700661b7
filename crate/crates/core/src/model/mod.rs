//! The classifier: byte embeddings, dual graph encoders, packet fusion, an
//! LSTM flow encoder and two classification heads.
//!
//! All arithmetic is `f64`. Parameters live in [`ModelParams`] as a flat
//! list of matrices in declaration order; biases are `1 x n` and PReLU
//! slopes `1 x 1`. Forward passes are recorded on a [`tape::Tape`] so the
//! same code serves inference and training.

pub mod checkpoint;
pub(crate) mod forward;
pub mod tape;

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use thiserror::Error;

use crate::format::FormatError;
use crate::graphs::{Origin, TrafficGraph};
use crate::losses::LossError;
use crate::rng::stream;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use forward::{infer_flows, InferenceOutput};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("cannot encode an empty graph")]
    EmptyGraph,
    #[error("cannot encode an empty packet sequence")]
    EmptySequence,
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("augmented embeddings cannot feed a classification head")]
    AugmentedIntoHead,
    #[error("invalid model dimensions: {0}")]
    Dims(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] FormatError),
}

pub const DEFAULT_EMBED_DIM: usize = 64;
pub const DEFAULT_HIDDEN_DIM: usize = 128;
pub const DEFAULT_GNN_LAYERS: usize = 2;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Byte embedding width `E`.
    pub embed: usize,
    /// Graph encoder width `H`.
    pub hidden: usize,
    /// Packet vector width `D`.
    pub packet: usize,
    /// LSTM state width `D_h`.
    pub flow: usize,
    /// Hidden width of both heads.
    pub head_hidden: usize,
    pub classes: usize,
    pub gnn_layers: usize,
}

impl ModelDims {
    pub fn new(classes: usize) -> Self {
        Self {
            embed: DEFAULT_EMBED_DIM,
            hidden: DEFAULT_HIDDEN_DIM,
            packet: DEFAULT_HIDDEN_DIM,
            flow: DEFAULT_HIDDEN_DIM,
            head_hidden: DEFAULT_HIDDEN_DIM,
            classes,
            gnn_layers: DEFAULT_GNN_LAYERS,
        }
    }

    /// Every width set to `width`; handy for tiny test models.
    pub fn uniform(width: usize, classes: usize) -> Self {
        Self {
            embed: width,
            hidden: width,
            packet: width,
            flow: width,
            head_hidden: width,
            classes,
            gnn_layers: DEFAULT_GNN_LAYERS,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let widths = [
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("packet", self.packet),
            ("flow", self.flow),
            ("head_hidden", self.head_hidden),
            ("gnn_layers", self.gnn_layers),
        ];
        for (name, v) in widths {
            if v == 0 || v > 1 << 16 {
                return Err(ModelError::Dims(format!("{name} = {v}")));
            }
        }
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return Err(ModelError::Dims(format!("classes = {}", self.classes)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Uniform,
    Zero,
    Slope,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GnnLayerIds {
    pub w_self: ParamId,
    pub w_neigh: ParamId,
    pub bias: ParamId,
    pub slope: ParamId,
}

/// Gate order: input, forget, cell candidate, output.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LstmIds {
    pub w: [ParamId; 4],
    pub b: [ParamId; 4],
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub slope: ParamId,
}

#[derive(Debug)]
pub(crate) struct Layout {
    pub specs: Vec<ParamSpec>,
    pub byte_embed: ParamId,
    pub header: Vec<GnnLayerIds>,
    pub payload: Vec<GnnLayerIds>,
    pub fusion_w: ParamId,
    pub fusion_b: ParamId,
    pub lstm: LstmIds,
    pub flow_head: HeadIds,
    pub packet_head: HeadIds,
}

impl Layout {
    fn new(d: &ModelDims) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, rows: usize, cols: usize, init: Init| {
            specs.push(ParamSpec {
                name,
                rows,
                cols,
                init,
            });
            ParamId(specs.len() - 1)
        };
        let byte_embed = add("byte_embed".into(), 256, d.embed, Init::Uniform);
        let mut gnn = |side: &str| {
            (0..d.gnn_layers)
                .map(|k| {
                    let input = if k == 0 { d.embed } else { d.hidden };
                    GnnLayerIds {
                        w_self: add(format!("{side}.{k}.w_self"), d.hidden, input, Init::Uniform),
                        w_neigh: add(format!("{side}.{k}.w_neigh"), d.hidden, input, Init::Uniform),
                        bias: add(format!("{side}.{k}.bias"), 1, d.hidden, Init::Zero),
                        slope: add(format!("{side}.{k}.prelu"), 1, 1, Init::Slope),
                    }
                })
                .collect::<Vec<_>>()
        };
        let header = gnn("header");
        let payload = gnn("payload");
        let fusion_w = add("fusion.w".into(), d.packet, 2 * d.hidden, Init::Uniform);
        let fusion_b = add("fusion.bias".into(), 1, d.packet, Init::Zero);
        let gates = ["input", "forget", "cell", "output"];
        let w = gates.map(|g| add(format!("lstm.w_{g}"), d.flow, d.packet + d.flow, Init::Uniform));
        let b = gates.map(|g| add(format!("lstm.b_{g}"), 1, d.flow, Init::Zero));
        let mut head = |name: &str, input: usize| HeadIds {
            w1: add(format!("{name}.w1"), d.head_hidden, input, Init::Uniform),
            b1: add(format!("{name}.b1"), 1, d.head_hidden, Init::Zero),
            w2: add(format!("{name}.w2"), d.classes, d.head_hidden, Init::Uniform),
            b2: add(format!("{name}.b2"), 1, d.classes, Init::Zero),
            slope: add(format!("{name}.prelu"), 1, 1, Init::Slope),
        };
        let flow_head = head("flow_head", d.flow);
        let packet_head = head("packet_head", d.packet);
        Self {
            specs,
            byte_embed,
            header,
            payload,
            fusion_w,
            fusion_b,
            lstm: LstmIds { w, b },
            flow_head,
            packet_head,
        }
    }

    pub fn gnn(&self, origin: Origin) -> &[GnnLayerIds] {
        match origin {
            Origin::Header => &self.header,
            Origin::Payload => &self.payload,
        }
    }
}

/// All trainable parameters, in declaration order: byte embedding, header
/// encoder layers, payload encoder layers, fusion, LSTM gates, flow head,
/// packet head.
#[derive(Debug, Clone)]
pub struct ModelParams {
    dims: ModelDims,
    layout: Arc<Layout>,
    pub(crate) tensors: Vec<Array2<f64>>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.tensors == other.tensors
    }
}

impl ModelParams {
    /// All-zero parameters (slopes included).
    pub fn zeros(dims: ModelDims) -> Result<Self, ModelError> {
        dims.validate()?;
        let layout = Layout::new(&dims);
        let tensors = layout.specs.iter().map(|s| Array2::zeros((s.rows, s.cols))).collect();
        Ok(Self {
            dims,
            layout: Arc::new(layout),
            tensors,
        })
    }

    /// Matrices uniform in `±1/sqrt(cols)`, zero biases, slopes 0.25.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self, ModelError> {
        let mut p = Self::zeros(dims)?;
        let mut rng = stream(seed, &[0x1417]);
        for (t, spec) in p.tensors.iter_mut().zip(&p.layout.specs) {
            match spec.init {
                Init::Zero => {}
                Init::Slope => t.fill(PRELU_INIT),
                Init::Uniform => {
                    let bound = 1.0 / (spec.cols as f64).sqrt();
                    t.mapv_inplace(|_| rng.gen_range(-bound..bound));
                }
            }
        }
        Ok(p)
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.layout.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.id(name).map(|id| &self.tensors[id.0])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.id(name).map(move |id| &mut self.tensors[id.0])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.layout.specs.iter().map(|s| s.name.as_str()).zip(&self.tensors)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub(crate) tensors: Vec<Array2<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn get<'a>(&'a self, params: &ModelParams, name: &str) -> Option<&'a Array2<f64>> {
        params.id(name).map(|id| &self.tensors[id.0])
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            *t *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn check_finite(&self, params: &ModelParams) -> Result<(), ModelError> {
        for (t, spec) in self.tensors.iter().zip(params.specs()) {
            if !t.iter().all(|v| v.is_finite()) {
                return Err(ModelError::NonFiniteGradient {
                    param: spec.name.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    Anchor,
    Augmented,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketEmbedding {
    pub vector: Array1<f64>,
    pub source: ViewKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowEmbedding {
    pub vector: Array1<f64>,
    pub source: ViewKind,
}

fn row(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(ndarray::Axis(0))
}

/// Graph-level vector (width `H`) from the encoder matching the graph's
/// origin.
pub fn encode_graph(params: &ModelParams, graph: &TrafficGraph) -> Result<Array1<f64>, ModelError> {
    let batch = forward::GraphBatch::new([graph])?;
    let mut tape = tape::Tape::new(params);
    let v = forward::encode_graphs(&mut tape, graph.origin(), &batch, &mut None);
    Ok(tape.value(v).row(0).to_owned())
}

pub fn encode_packet(
    params: &ModelParams,
    header: &TrafficGraph,
    payload: &TrafficGraph,
) -> Result<PacketEmbedding, ModelError> {
    let hb = forward::GraphBatch::new([header])?;
    let pb = forward::GraphBatch::new([payload])?;
    let mut tape = tape::Tape::new(params);
    let v = forward::encode_packets(&mut tape, &hb, &pb, &mut None);
    Ok(PacketEmbedding {
        vector: tape.value(v).row(0).to_owned(),
        source: ViewKind::Anchor,
    })
}

/// Final LSTM hidden state over the packet vectors, from a zero state.
pub fn encode_flow(params: &ModelParams, packets: &[PacketEmbedding]) -> Result<FlowEmbedding, ModelError> {
    if packets.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let d = params.dims().packet;
    let mut x = Array2::zeros((packets.len(), d));
    for (mut r, p) in x.rows_mut().into_iter().zip(packets) {
        if p.vector.len() != d {
            return Err(ModelError::DimensionMismatch {
                what: "packet vector",
                expected: d,
                found: p.vector.len(),
            });
        }
        r.assign(&p.vector);
    }
    let source = if packets.iter().all(|p| p.source == ViewKind::Anchor) {
        ViewKind::Anchor
    } else {
        ViewKind::Augmented
    };
    let mut tape = tape::Tape::new(params);
    let input = tape.input(x);
    let rows: Vec<u32> = (0..packets.len() as u32).collect();
    let v = forward::encode_flows(&mut tape, input, &[rows]);
    Ok(FlowEmbedding {
        vector: tape.value(v).row(0).to_owned(),
        source,
    })
}

fn run_head(params: &ModelParams, ids: HeadIds, x: &Array1<f64>, width: usize) -> Result<Array1<f64>, ModelError> {
    if x.len() != width {
        return Err(ModelError::DimensionMismatch {
            what: "head input",
            expected: width,
            found: x.len(),
        });
    }
    let mut tape = tape::Tape::new(params);
    let input = tape.input(row(x));
    let v = forward::head(&mut tape, ids, input);
    Ok(tape.value(v).row(0).to_owned())
}

/// Flow-level logits. Only anchor embeddings are accepted.
pub fn flow_head(params: &ModelParams, f: &FlowEmbedding) -> Result<Array1<f64>, ModelError> {
    if f.source != ViewKind::Anchor {
        return Err(ModelError::AugmentedIntoHead);
    }
    run_head(params, params.layout().flow_head, &f.vector, params.dims().flow)
}

/// Packet-level logits. Only anchor embeddings are accepted.
pub fn packet_head(params: &ModelParams, p: &PacketEmbedding) -> Result<Array1<f64>, ModelError> {
    if p.source != ViewKind::Anchor {
        return Err(ModelError::AugmentedIntoHead);
    }
    run_head(params, params.layout().packet_head, &p.vector, params.dims().packet)
}
