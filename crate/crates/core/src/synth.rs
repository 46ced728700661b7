//! Labeled synthetic traffic.
//!
//! Each class gets its own payload byte alphabet, half of it drawn from a
//! pool shared by all classes, with a few recurring motifs, its own packet-length rhythm and a transport protocol (even
//! classes TCP, odd classes UDP). Flows are written as Ethernet/IPv4 frames
//! with valid checksums into pcap captures, so every dataset built from
//! them goes through the regular ingest pipeline. TCP flows open with a
//! three-way handshake and carry pure ACKs, which cleaning removes.

use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::dataset::Dataset;
use crate::ingest::decode::{checksum_field, sum_words, PROTO_TCP, PROTO_UDP};
use crate::ingest::pcap::LINKTYPE_ETHERNET;
use crate::ingest::{
    parse_capture_bytes, preprocess, Capture, DatasetManifest, IngestError, ManifestEntry, PcapWriter, MANIFEST_FILE,
    PreprocessOptions, PreprocessSummary,
};
use crate::rng::{stream, Rng};

const ALPHABET_SIZE: usize = 12;
/// Alphabet bytes drawn from a pool common to every class.
const SHARED_BYTES: usize = 6;
const SHARED_POOL: usize = 16;
const MOTIFS: usize = 3;
const MOTIF_LEN: usize = 4;
const MAX_PAYLOAD: usize = 96;
const BASE_TIME: f64 = 1_600_000_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub flows_per_class: usize,
    pub seed: u64,
    /// Payload-carrying packets per flow, inclusive range.
    pub min_packets: usize,
    pub max_packets: usize,
    /// Spread each flow's data packets evenly over this many seconds.
    pub span_seconds: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            flows_per_class: 50,
            seed: 0,
            min_packets: 4,
            max_packets: 10,
            span_seconds: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.classes < 2 || self.classes > 200 {
            return Err(format!("classes must lie in [2, 200], got {}", self.classes));
        }
        if self.flows_per_class < 4 || self.flows_per_class > 60_000 {
            return Err(format!(
                "flows per class must lie in [4, 60000], got {}",
                self.flows_per_class
            ));
        }
        if self.min_packets < 1 || self.min_packets > self.max_packets || self.max_packets > 1000 {
            return Err(format!(
                "packet range {}..={} is invalid",
                self.min_packets, self.max_packets
            ));
        }
        if let Some(s) = self.span_seconds {
            if !(s > 0.0 && s.is_finite()) {
                return Err(format!("span must be positive, got {s}"));
            }
        }
        Ok(())
    }

    pub fn label_names(&self) -> Vec<String> {
        (0..self.classes).map(|c| format!("class{c}")).collect()
    }
}

/// Header fields of one synthetic IPv4 packet.
#[derive(Debug, Clone)]
pub struct FrameSpec<'a> {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
    pub ttl: u8,
    pub ip_id: u16,
    pub seq: u32,
    pub ack: u32,
    pub tcp_flags: u8,
    pub window: u16,
    pub payload: &'a [u8],
}

pub const TCP_FIN: u8 = 0x01;
pub const TCP_SYN: u8 = 0x02;
pub const TCP_PSH: u8 = 0x08;
pub const TCP_ACK: u8 = 0x10;

/// Ethernet + IPv4 + TCP/UDP frame with correct checksums.
pub fn ipv4_frame(spec: &FrameSpec<'_>) -> Vec<u8> {
    let transport_len = match spec.protocol {
        PROTO_TCP => 20,
        PROTO_UDP => 8,
        other => panic!("unsupported protocol {other}"),
    } + spec.payload.len();
    let total_len = 20 + transport_len;
    let mut f = Vec::with_capacity(14 + total_len);
    f.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x01, 0x02, 0, 0, 0, 0, 0x02, 0x08, 0x00]);

    let ip_start = f.len();
    f.extend_from_slice(&[0x45, 0]);
    f.extend_from_slice(&(total_len as u16).to_be_bytes());
    f.extend_from_slice(&spec.ip_id.to_be_bytes());
    f.extend_from_slice(&[0x40, 0x00, spec.ttl, spec.protocol, 0, 0]);
    f.extend_from_slice(&spec.src.octets());
    f.extend_from_slice(&spec.dst.octets());
    let ip_sum = checksum_field(sum_words(&f[ip_start..], 0));
    f[ip_start + 10..ip_start + 12].copy_from_slice(&ip_sum.to_be_bytes());

    let tr_start = f.len();
    f.extend_from_slice(&spec.src_port.to_be_bytes());
    f.extend_from_slice(&spec.dst_port.to_be_bytes());
    let csum_at = if spec.protocol == PROTO_TCP {
        f.extend_from_slice(&spec.seq.to_be_bytes());
        f.extend_from_slice(&spec.ack.to_be_bytes());
        f.extend_from_slice(&[0x50, spec.tcp_flags]);
        f.extend_from_slice(&spec.window.to_be_bytes());
        f.extend_from_slice(&[0, 0, 0, 0]);
        tr_start + 16
    } else {
        f.extend_from_slice(&(transport_len as u16).to_be_bytes());
        f.extend_from_slice(&[0, 0]);
        tr_start + 6
    };
    f.extend_from_slice(spec.payload);
    let mut pseudo = sum_words(&f[ip_start + 12..ip_start + 20], 0);
    pseudo += spec.protocol as u32 + transport_len as u32;
    let mut sum = checksum_field(sum_words(&f[tr_start..], pseudo));
    if spec.protocol == PROTO_UDP && sum == 0 {
        sum = 0xFFFF;
    }
    f[csum_at..csum_at + 2].copy_from_slice(&sum.to_be_bytes());
    f
}

struct ClassProfile {
    alphabet: Vec<u8>,
    motifs: Vec<Vec<u8>>,
    base_len: usize,
    rhythm: [usize; 3],
    protocol: u8,
    server_port: u16,
}

fn class_profile(seed: u64, class: usize) -> ClassProfile {
    let mut all: Vec<u8> = (0..=255).collect();
    all.shuffle(&mut stream(seed, &[0x5b]));
    let (pool, rest) = all.split_at_mut(SHARED_POOL);
    let mut rng = stream(seed, &[0x5c, class as u64]);
    pool.shuffle(&mut rng);
    rest.shuffle(&mut rng);
    let mut alphabet = pool[..SHARED_BYTES].to_vec();
    alphabet.extend_from_slice(&rest[..ALPHABET_SIZE - SHARED_BYTES]);
    let motifs = (0..MOTIFS)
        .map(|_| (0..MOTIF_LEN).map(|_| *alphabet.choose(&mut rng).unwrap()).collect())
        .collect();
    ClassProfile {
        alphabet,
        motifs,
        base_len: 16 + (class * 11) % 40,
        rhythm: [rng.gen_range(0..24), rng.gen_range(0..24), rng.gen_range(0..24)],
        protocol: if class % 2 == 0 { PROTO_TCP } else { PROTO_UDP },
        server_port: if class % 2 == 0 { 443 } else { 4500 + class as u16 },
    }
}

fn payload(profile: &ClassProfile, index: usize, rng: &mut Rng) -> Vec<u8> {
    let len = (profile.base_len + profile.rhythm[index % 3] + rng.gen_range(0..4)).min(MAX_PAYLOAD);
    let mut out = Vec::with_capacity(len + MOTIF_LEN);
    while out.len() < len {
        if rng.gen_bool(0.7) {
            out.extend_from_slice(profile.motifs.choose(rng).unwrap());
        } else {
            out.push(*profile.alphabet.choose(rng).unwrap());
        }
    }
    out.truncate(len);
    out
}

struct TimedFrame {
    micros: u64,
    frame: Vec<u8>,
}

fn flow_frames(cfg: &SynthConfig, profile: &ClassProfile, class: usize, flow: usize) -> Vec<TimedFrame> {
    let mut rng = stream(cfg.seed, &[0xf1, class as u64, flow as u64]);
    let client = Ipv4Addr::new(10, class as u8, (flow >> 8) as u8, (flow & 0xFF) as u8);
    let server = Ipv4Addr::new(172, 16, class as u8, 1);
    let client_port = 20_000 + (flow % 40_000) as u16;
    let n_data = rng.gen_range(cfg.min_packets..=cfg.max_packets);
    let start = BASE_TIME + flow as f64 * 0.5 + class as f64 * 0.1;
    let gap = |k: usize| match cfg.span_seconds {
        Some(span) => span * k as f64 / n_data as f64,
        None => 0.02 * k as f64,
    };
    let ttl = if rng.gen_bool(0.5) { 64 } else { 128 };
    let mut ip_id: u16 = rng.gen();
    let (mut client_seq, mut server_seq): (u32, u32) = (rng.gen(), rng.gen());
    let mut frames = Vec::new();
    let mut emit = |t: f64, from_client: bool, flags: u8, seq: u32, ack: u32, data: &[u8], id: u16| {
        let (src, dst, sp, dp) = if from_client {
            (client, server, client_port, profile.server_port)
        } else {
            (server, client, profile.server_port, client_port)
        };
        let frame = ipv4_frame(&FrameSpec {
            src,
            dst,
            src_port: sp,
            dst_port: dp,
            protocol: profile.protocol,
            ttl,
            ip_id: id,
            seq,
            ack,
            tcp_flags: flags,
            window: 65_535,
            payload: data,
        });
        frames.push(TimedFrame {
            micros: (t * 1e6).round() as u64,
            frame,
        });
    };

    let tcp = profile.protocol == PROTO_TCP;
    if tcp {
        emit(start - 0.003, true, TCP_SYN, client_seq, 0, &[], ip_id);
        client_seq = client_seq.wrapping_add(1);
        emit(start - 0.002, false, TCP_SYN | TCP_ACK, server_seq, client_seq, &[], ip_id.wrapping_add(1));
        server_seq = server_seq.wrapping_add(1);
        emit(start - 0.001, true, TCP_ACK, client_seq, server_seq, &[], ip_id.wrapping_add(2));
        ip_id = ip_id.wrapping_add(3);
    }
    for k in 0..n_data {
        let t = start + gap(k);
        let from_client = k % 2 == 0 || rng.gen_bool(0.3);
        let data = payload(profile, k, &mut rng);
        let (seq, ack) = if from_client {
            (client_seq, server_seq)
        } else {
            (server_seq, client_seq)
        };
        emit(t, from_client, TCP_PSH | TCP_ACK, seq, ack, &data, ip_id);
        ip_id = ip_id.wrapping_add(1);
        if from_client {
            client_seq = client_seq.wrapping_add(data.len() as u32);
        } else {
            server_seq = server_seq.wrapping_add(data.len() as u32);
        }
        if tcp && rng.gen_bool(0.5) {
            let (seq, ack) = if from_client {
                (server_seq, client_seq)
            } else {
                (client_seq, server_seq)
            };
            emit(t + 0.001, !from_client, TCP_ACK, seq, ack, &[], ip_id);
            ip_id = ip_id.wrapping_add(1);
        }
    }
    frames
}

/// Per-class pcap file contents, in time order.
pub fn synth_pcaps(cfg: &SynthConfig) -> Result<Vec<Vec<u8>>, String> {
    cfg.validate()?;
    Ok((0..cfg.classes)
        .map(|class| {
            let profile = class_profile(cfg.seed, class);
            let mut frames: Vec<TimedFrame> = (0..cfg.flows_per_class)
                .flat_map(|flow| flow_frames(cfg, &profile, class, flow))
                .collect();
            frames.sort_by_key(|f| f.micros);
            let mut w = PcapWriter::new(Vec::new(), LINKTYPE_ETHERNET).expect("in-memory write");
            for f in &frames {
                w.write_packet(f.micros, &f.frame).expect("in-memory write");
            }
            w.into_inner()
        })
        .collect())
}

/// Parsed synthetic captures paired with their label indices.
pub fn synth_captures(cfg: &SynthConfig) -> Result<Vec<(Capture, u16)>, String> {
    synth_pcaps(cfg)?
        .iter()
        .enumerate()
        .map(|(label, bytes)| {
            let capture = parse_capture_bytes(bytes).map_err(|e| e.to_string())?;
            Ok((capture, label as u16))
        })
        .collect()
}

/// Synthetic captures run through [`preprocess`].
pub fn synth_dataset(
    cfg: &SynthConfig,
    opts: &PreprocessOptions,
) -> Result<(Dataset, PreprocessSummary), IngestError> {
    let captures = synth_captures(cfg).map_err(IngestError::Manifest)?;
    preprocess(&captures, &cfg.label_names(), opts)
}

/// Writes one pcap per class plus `manifest.toml` into `dir`; returns the
/// manifest path.
pub fn write_corpus(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf, crate::Error> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| crate::Error::Io { path, source }
    };
    let pcaps = synth_pcaps(cfg).map_err(IngestError::Manifest)?;
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let names = cfg.label_names();
    let mut entries = Vec::new();
    for (name, bytes) in names.iter().zip(&pcaps) {
        let file = format!("{name}.pcap");
        let path = dir.join(&file);
        std::fs::write(&path, bytes).map_err(io(&path))?;
        entries.push(ManifestEntry {
            path: file.into(),
            label: name.clone(),
        });
    }
    let manifest = DatasetManifest::new(entries, Some(names))?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_toml()).map_err(io(&path))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::decode::decode;
    use crate::ingest::Split;

    #[test]
    fn frames_decode_with_valid_checksums() {
        let caps = synth_captures(&SynthConfig {
            classes: 2,
            flows_per_class: 4,
            ..Default::default()
        })
        .unwrap();
        for (cap, _) in &caps {
            assert_eq!(cap.warnings, 0);
            for raw in &cap.packets {
                let d = decode(cap.link_type, raw).unwrap();
                assert!(d.checksums_ok);
            }
        }
    }

    #[test]
    fn four_by_fifty_splits_180_20() {
        let cfg = SynthConfig {
            classes: 4,
            flows_per_class: 50,
            seed: 3,
            ..Default::default()
        };
        let (ds, summary) = synth_dataset(&cfg, &PreprocessOptions::default()).unwrap();
        assert_eq!(ds.flows.len(), 200);
        assert_eq!(ds.indices(Split::Train).len(), 180);
        assert_eq!(ds.indices(Split::Test).len(), 20);
        for l in &summary.labels {
            assert_eq!((l.train_flows, l.test_flows), (45, 5));
        }
        assert!(summary.dropped.empty_payload > 0);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig {
            classes: 3,
            flows_per_class: 5,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(synth_pcaps(&cfg).unwrap(), synth_pcaps(&cfg).unwrap());
        let other = SynthConfig { seed: 10, ..cfg.clone() };
        assert_ne!(synth_pcaps(&cfg).unwrap(), synth_pcaps(&other).unwrap());
    }

    #[test]
    fn invalid_configs() {
        let bad = |c: SynthConfig| c.validate().is_err();
        assert!(bad(SynthConfig { classes: 1, ..Default::default() }));
        assert!(bad(SynthConfig { flows_per_class: 3, ..Default::default() }));
        assert!(bad(SynthConfig { min_packets: 5, max_packets: 4, ..Default::default() }));
    }
}
