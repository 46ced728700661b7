//! In-memory dataset and its `CTFE` file encoding.
//!
//! Layout (little-endian, version 1):
//!
//! ```text
//! "CTFE"  version:u16  C:u16
//! C x { name_len:u16  name:utf8 }
//! pmi_window:u16  flow_count:u32
//! flow_count x {
//!     label:u16  block:u32  split:u8 (0 train, 1 test)  packet_count:u8
//!     packet_count x { header_len:u16 header  payload_len:u16 payload }
//! }
//! for every flow, for every packet, header graph then payload graph:
//!     node_count:u16  node_values:u8[node_count]
//!     edge_count:u32  edge_count x { a:u16 b:u16 }
//! crc32:u32 over everything above
//! ```
//!
//! Packet timestamps are not stored; loaded packets carry timestamp 0.

use std::path::Path;

use crate::format::{FormatError, Reader, Writer};
use crate::graphs::{Origin, PacketGraphs, TrafficGraph};
use crate::ingest::{CleanPacket, LabelSummary, Split};

pub const DATASET_MAGIC: &[u8; 4] = b"CTFE";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFlow {
    pub label: u16,
    pub block_index: u32,
    pub split: Split,
    pub packets: Vec<CleanPacket>,
    /// One entry per packet, same order.
    pub graphs: Vec<PacketGraphs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub label_names: Vec<String>,
    pub pmi_window: u16,
    pub flows: Vec<DatasetFlow>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    /// Indices of the flows on one side of the split, in file order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.flows
            .iter()
            .enumerate()
            .filter(|(_, f)| f.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn label_summaries(&self) -> Vec<LabelSummary> {
        let mut out: Vec<LabelSummary> = self
            .label_names
            .iter()
            .map(|n| LabelSummary {
                name: n.clone(),
                ..Default::default()
            })
            .collect();
        for f in &self.flows {
            let s = &mut out[f.label as usize];
            match f.split {
                Split::Train => {
                    s.train_flows += 1;
                    s.train_packets += f.packets.len();
                }
                Split::Test => {
                    s.test_flows += 1;
                    s.test_packets += f.packets.len();
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
        w.u16(self.label_names.len() as u16);
        for name in &self.label_names {
            w.short_bytes(name.as_bytes());
        }
        w.u16(self.pmi_window);
        w.u32(self.flows.len() as u32);
        for f in &self.flows {
            w.u16(f.label);
            w.u32(f.block_index);
            w.u8(match f.split {
                Split::Train => 0,
                Split::Test => 1,
            });
            w.u8(u8::try_from(f.packets.len()).expect("flows hold at most 255 packets"));
            for p in &f.packets {
                w.short_bytes(&p.header_bytes);
                w.short_bytes(&p.payload_bytes);
            }
        }
        for f in &self.flows {
            for g in &f.graphs {
                write_graph(&mut w, &g.header);
                write_graph(&mut w, &g.payload);
            }
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::open(data, DATASET_MAGIC, "dataset", DATASET_VERSION)?;
        let classes = r.u16()? as usize;
        let mut label_names = Vec::with_capacity(classes);
        for _ in 0..classes {
            let raw = r.short_bytes()?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| FormatError::Invalid("label name is not UTF-8".into()))?;
            label_names.push(name.to_owned());
        }
        if classes < 2 {
            return Err(FormatError::Invalid(format!("{classes} categories")));
        }
        let pmi_window = r.u16()?;
        let count = r.u32()? as usize;
        let mut flows = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let label = r.u16()?;
            if label as usize >= classes {
                return Err(FormatError::Invalid(format!("label {label} out of range")));
            }
            let block_index = r.u32()?;
            let split = match r.u8()? {
                0 => Split::Train,
                1 => Split::Test,
                other => return Err(FormatError::Invalid(format!("split marker {other}"))),
            };
            let n = r.u8()? as usize;
            if n == 0 {
                return Err(FormatError::Invalid("flow without packets".into()));
            }
            let mut packets = Vec::with_capacity(n);
            for _ in 0..n {
                let header_bytes = r.short_bytes()?.to_vec();
                let payload_bytes = r.short_bytes()?.to_vec();
                packets.push(CleanPacket {
                    timestamp: 0.0,
                    header_bytes,
                    payload_bytes,
                });
            }
            flows.push(DatasetFlow {
                label,
                block_index,
                split,
                packets,
                graphs: Vec::new(),
            });
        }
        for f in &mut flows {
            for _ in 0..f.packets.len() {
                let header = read_graph(&mut r, Origin::Header)?;
                let payload = read_graph(&mut r, Origin::Payload)?;
                f.graphs.push(PacketGraphs { header, payload });
            }
        }
        r.finish()?;
        Ok(Self {
            label_names,
            pmi_window,
            flows,
        })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, crate::Error> {
        let data = std::fs::read(path).map_err(|source| crate::Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_bytes(&data)?)
    }
}

fn write_graph(w: &mut Writer, g: &TrafficGraph) {
    w.u16(g.node_count() as u16);
    w.bytes(g.nodes());
    w.u32(g.edge_count() as u32);
    for &(a, b) in g.edges() {
        w.u16(a);
        w.u16(b);
    }
}

fn read_graph(r: &mut Reader<'_>, origin: Origin) -> Result<TrafficGraph, FormatError> {
    let n = r.u16()? as usize;
    if n == 0 || n > 256 {
        return Err(FormatError::Invalid(format!("graph with {n} nodes")));
    }
    let nodes = r.bytes(n)?.to_vec();
    let m = r.u32()? as usize;
    let mut edges = Vec::with_capacity(m.min(1 << 16));
    for _ in 0..m {
        edges.push((r.u16()?, r.u16()?));
    }
    let g = TrafficGraph::from_parts(nodes, edges, origin).map_err(FormatError::Invalid)?;
    if g.edge_count() != m {
        return Err(FormatError::Invalid("duplicate edges".into()));
    }
    Ok(g)
}
