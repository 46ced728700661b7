use std::collections::{BTreeMap, HashSet};

use super::decode::{decode, DecodedPacket, PROTO_TCP};
use super::pcap::Capture;
use super::{CleanPacket, FiveTuple};

/// Packets kept per flow after cleaning.
pub const FLOW_LEN_CAP: usize = 15;
/// Flows with more packets than this are rejected outright.
pub const MAX_FLOW_PACKETS: usize = 10_000;

/// Anything carrying a capture timestamp.
pub trait Timestamped {
    fn timestamp(&self) -> f64;
}

impl Timestamped for CleanPacket {
    fn timestamp(&self) -> f64 {
        self.timestamp
    }
}

/// Packets sharing a direction-normalized five-tuple, in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow<P> {
    pub key: FiveTuple,
    pub label: u16,
    /// Index of the time block this flow was cut from; 0 when unblocked.
    pub block_index: u32,
    pub packets: Vec<P>,
}

/// A cleaned, truncated, scrubbed flow.
pub type RawFlow = Flow<CleanPacket>;
/// A flow straight out of assembly, before cleaning.
pub type AssembledFlow = Flow<FlowPacket>;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowPacket {
    pub decoded: DecodedPacket,
    /// True when the packet travels in the canonical key's direction.
    pub forward: bool,
}

impl Timestamped for FlowPacket {
    fn timestamp(&self) -> f64 {
        self.decoded.timestamp
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssemblyStats {
    pub packets: usize,
    pub unparseable: usize,
}

/// Groups the packets of labeled captures into bidirectional flows.
///
/// Flows come out sorted by `(key, label)`. Within a flow, packets are
/// ordered by timestamp, then by capture position (file, record index).
pub fn assemble_flows(captures: &[(Capture, u16)]) -> (Vec<AssembledFlow>, AssemblyStats) {
    let mut stats = AssemblyStats::default();
    let mut groups: BTreeMap<(FiveTuple, u16), Vec<((usize, usize), FlowPacket)>> = BTreeMap::new();
    for (file, (capture, label)) in captures.iter().enumerate() {
        for raw in &capture.packets {
            stats.packets += 1;
            let decoded = match decode(capture.link_type, raw) {
                Ok(d) => d,
                Err(_) => {
                    stats.unparseable += 1;
                    continue;
                }
            };
            let (key, forward) = decoded.tuple.canonical();
            groups
                .entry((key, *label))
                .or_default()
                .push(((file, raw.index), FlowPacket { decoded, forward }));
        }
    }
    let flows = groups
        .into_iter()
        .map(|((key, label), mut packets)| {
            packets.sort_by(|(oa, a), (ob, b)| {
                a.timestamp().total_cmp(&b.timestamp()).then(oa.cmp(ob))
            });
            Flow {
                key,
                label,
                block_index: 0,
                packets: packets.into_iter().map(|(_, p)| p).collect(),
            }
        })
        .collect();
    (flows, stats)
}

/// Cuts a time-ordered flow into non-overlapping `[t0 + k*w, t0 + (k+1)*w)`
/// blocks, `t0` being the first packet's timestamp. Empty blocks are not
/// emitted.
pub fn split_time_blocks<P: Timestamped>(flow: Flow<P>, block_seconds: f64) -> Vec<Flow<P>> {
    assert!(block_seconds > 0.0, "block length must be positive");
    let Some(t0) = flow.packets.first().map(Timestamped::timestamp) else {
        return Vec::new();
    };
    let mut blocks: Vec<Flow<P>> = Vec::new();
    for p in flow.packets {
        let k = ((p.timestamp() - t0) / block_seconds).floor().max(0.0) as u32;
        match blocks.last_mut() {
            Some(b) if b.block_index == k => b.packets.push(p),
            _ => blocks.push(Flow {
                key: flow.key.clone(),
                label: flow.label,
                block_index: k,
                packets: vec![p],
            }),
        }
    }
    blocks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rejection {
    NoPayload,
    TooManyPackets,
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::NoPayload => f.write_str("no payload"),
            Rejection::TooManyPackets => write!(f, "more than {MAX_FLOW_PACKETS} packets"),
        }
    }
}

/// Per-stage packet drop counts from [`clean_flow`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CleaningStats {
    pub bad: usize,
    pub retransmissions: usize,
    pub empty_payload: usize,
    pub truncated: usize,
}

impl std::ops::AddAssign for CleaningStats {
    fn add_assign(&mut self, o: Self) {
        self.bad += o.bad;
        self.retransmissions += o.retransmissions;
        self.empty_payload += o.empty_payload;
        self.truncated += o.truncated;
    }
}

/// Removes bad packets, retransmissions and payload-less packets, then keeps
/// at most `cap` packets, scrubbed of addresses and ports.
pub fn clean_flow(
    flow: AssembledFlow,
    cap: usize,
    stats: &mut CleaningStats,
) -> Result<RawFlow, Rejection> {
    if flow.packets.len() > MAX_FLOW_PACKETS {
        return Err(Rejection::TooManyPackets);
    }
    let mut seen: [HashSet<(u32, usize)>; 2] = [HashSet::new(), HashSet::new()];
    let mut kept = Vec::new();
    for p in flow.packets {
        let d = &p.decoded;
        if !d.checksums_ok || d.captured_len == 0 {
            stats.bad += 1;
            continue;
        }
        if d.payload.is_empty() {
            stats.empty_payload += 1;
            continue;
        }
        if d.tuple.protocol == PROTO_TCP {
            let span = (d.tcp_seq.unwrap_or(0), d.payload.len());
            if !seen[p.forward as usize].insert(span) {
                stats.retransmissions += 1;
                continue;
            }
        }
        kept.push(p);
    }
    if kept.is_empty() {
        return Err(Rejection::NoPayload);
    }
    if kept.len() > cap {
        stats.truncated += kept.len() - cap;
        kept.truncate(cap);
    }
    Ok(Flow {
        key: flow.key,
        label: flow.label,
        block_index: flow.block_index,
        packets: kept
            .into_iter()
            .map(|p| CleanPacket {
                timestamp: p.decoded.timestamp,
                header_bytes: p.decoded.scrubbed_header(),
                payload_bytes: p.decoded.payload,
            })
            .collect(),
    })
}
