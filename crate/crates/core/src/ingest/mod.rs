//! From packet captures to a labeled, cleaned, split flow dataset.
//!
//! The pipeline is: parse captures, decode frames, group packets into
//! bidirectional flows, optionally cut flows into time blocks, clean
//! (drop bad packets, retransmissions and payload-less packets, keep the
//! first packets, scrub addresses and ports), split 9:1 per label, and
//! build the header and payload graphs of every kept packet.

pub mod decode;
pub mod flow;
pub mod manifest;
pub mod pcap;
pub mod split;

use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{Dataset, DatasetFlow};
use crate::graphs::{build_packet_graphs, GraphError, DEFAULT_PMI_WINDOW};
use crate::profile::Profile;

pub use flow::{
    assemble_flows, clean_flow, split_time_blocks, AssembledFlow, AssemblyStats, CleaningStats,
    Flow, FlowPacket, RawFlow, Rejection, Timestamped, FLOW_LEN_CAP, MAX_FLOW_PACKETS,
};
pub use manifest::{DatasetManifest, ManifestEntry, MANIFEST_FILE};
pub use pcap::{parse_capture, parse_capture_bytes, Capture, PcapWriter, RawPacket};
pub use split::{stratified_assignment, stratified_split, Split};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a pcap file (magic {magic:#010x})")]
    UnknownMagic { magic: u32 },
    #[error("capture is shorter than the pcap global header")]
    TruncatedHeader,
    #[error("{}: {source}", path.display())]
    Capture {
        path: PathBuf,
        #[source]
        source: Box<IngestError>,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("label {label:?} has {count} flow(s); at least 2 are needed for a train/test split")]
    TooFewFlows { label: String, count: usize },
    #[error("no flows survived cleaning")]
    NoFlows,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Flow key. Use [`FiveTuple::canonical`] to get the direction-normalized
/// form shared by both directions of a conversation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FiveTuple {
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
}

impl Default for FiveTuple {
    fn default() -> Self {
        Self {
            src_ip: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            dst_ip: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            src_port: 0,
            dst_port: 0,
            protocol: 0,
        }
    }
}

impl FiveTuple {
    pub fn reversed(&self) -> Self {
        Self {
            src_ip: self.dst_ip,
            dst_ip: self.src_ip,
            src_port: self.dst_port,
            dst_port: self.src_port,
            protocol: self.protocol,
        }
    }

    /// Orders the endpoints so that `(src_ip, src_port) <= (dst_ip,
    /// dst_port)`; the flag is true when `self` was already in that order.
    pub fn canonical(&self) -> (Self, bool) {
        if (self.src_ip, self.src_port) <= (self.dst_ip, self.dst_port) {
            (self.clone(), true)
        } else {
            (self.reversed(), false)
        }
    }
}

/// A packet after cleaning: no link-layer bytes, no addresses, no ports.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanPacket {
    pub timestamp: f64,
    pub header_bytes: Vec<u8>,
    pub payload_bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessOptions {
    pub block_seconds: Option<f64>,
    pub pmi_window: usize,
    pub split_ratio: f64,
    pub flow_len_cap: usize,
    pub seed: u64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            block_seconds: None,
            pmi_window: DEFAULT_PMI_WINDOW,
            split_ratio: 0.9,
            flow_len_cap: FLOW_LEN_CAP,
            seed: 0,
        }
    }
}

impl PreprocessOptions {
    pub fn for_profile(profile: Profile, seed: u64) -> Self {
        Self {
            block_seconds: profile.time_block_seconds(),
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelSummary {
    pub name: String,
    pub train_flows: usize,
    pub test_flows: usize,
    pub train_packets: usize,
    pub test_packets: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PreprocessSummary {
    pub labels: Vec<LabelSummary>,
    pub packets_read: usize,
    pub unparseable: usize,
    pub capture_warnings: usize,
    pub rejected: BTreeMap<Rejection, usize>,
    pub dropped: CleaningStats,
}

impl std::fmt::Display for PreprocessSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<24} {:>11} {:>10} {:>13} {:>12}",
            "label", "train flows", "test flows", "train packets", "test packets"
        )?;
        for l in &self.labels {
            writeln!(
                f,
                "{:<24} {:>11} {:>10} {:>13} {:>12}",
                l.name, l.train_flows, l.test_flows, l.train_packets, l.test_packets
            )?;
        }
        writeln!(
            f,
            "packets read {}, unparseable {}, truncated captures {}",
            self.packets_read, self.unparseable, self.capture_warnings
        )?;
        writeln!(
            f,
            "packets dropped: bad {}, retransmission {}, no payload {}, beyond cap {}",
            self.dropped.bad,
            self.dropped.retransmissions,
            self.dropped.empty_payload,
            self.dropped.truncated
        )?;
        for (reason, n) in &self.rejected {
            writeln!(f, "flows rejected ({reason}): {n}")?;
        }
        Ok(())
    }
}

/// Runs the whole pipeline over already-parsed captures, each paired with
/// its label index.
pub fn preprocess(
    captures: &[(Capture, u16)],
    label_names: &[String],
    opts: &PreprocessOptions,
) -> Result<(Dataset, PreprocessSummary), IngestError> {
    let mut summary = PreprocessSummary {
        capture_warnings: captures.iter().map(|(c, _)| c.warnings).sum(),
        ..Default::default()
    };
    let (assembled, stats) = assemble_flows(captures);
    summary.packets_read = stats.packets;
    summary.unparseable = stats.unparseable;

    let mut flows: Vec<RawFlow> = Vec::new();
    for flow in assembled {
        if flow.packets.len() > MAX_FLOW_PACKETS {
            *summary.rejected.entry(Rejection::TooManyPackets).or_default() += 1;
            continue;
        }
        let blocks = match opts.block_seconds {
            Some(w) => split_time_blocks(flow, w),
            None => vec![flow],
        };
        for block in blocks {
            match clean_flow(block, opts.flow_len_cap, &mut summary.dropped) {
                Ok(f) => flows.push(f),
                Err(reason) => *summary.rejected.entry(reason).or_default() += 1,
            }
        }
    }
    if flows.is_empty() {
        return Err(IngestError::NoFlows);
    }

    let labels: Vec<u16> = flows.iter().map(|f| f.label).collect();
    let splits = stratified_assignment(&labels, label_names, opts.split_ratio, opts.seed)?;

    let window = opts.pmi_window;
    let dataset_flows = flows
        .into_par_iter()
        .zip(splits)
        .map(|(flow, split)| {
            let graphs = flow
                .packets
                .iter()
                .map(|p| build_packet_graphs(p, window))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(DatasetFlow {
                label: flow.label,
                block_index: flow.block_index,
                split,
                packets: flow.packets,
                graphs,
            })
        })
        .collect::<Result<Vec<_>, IngestError>>()?;

    let dataset = Dataset {
        label_names: label_names.to_vec(),
        pmi_window: window as u16,
        flows: dataset_flows,
    };
    summary.labels = dataset.label_summaries();
    Ok((dataset, summary))
}

/// Parses every capture listed in `manifest` (paths relative to `base_dir`)
/// and runs [`preprocess`].
pub fn preprocess_manifest(
    manifest: &DatasetManifest,
    base_dir: &Path,
    opts: &PreprocessOptions,
) -> Result<(Dataset, PreprocessSummary), IngestError> {
    let captures = manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = base_dir.join(&e.path);
            let capture = parse_capture(&path).map_err(|err| match err {
                io @ IngestError::Io { .. } => io,
                other => IngestError::Capture {
                    path: path.clone(),
                    source: Box::new(other),
                },
            })?;
            let label = manifest.label_index(&e.label).expect("validated manifest");
            Ok((capture, label))
        })
        .collect::<Result<Vec<_>, IngestError>>()?;
    preprocess(&captures, &manifest.label_names, opts)
}
