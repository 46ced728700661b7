//! Link, network and transport header decoding.

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use super::pcap::{
    RawPacket, LINKTYPE_ETHERNET, LINKTYPE_IPV4, LINKTYPE_IPV6, LINKTYPE_LINUX_SLL, LINKTYPE_RAW,
};
use super::FiveTuple;

pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86DD;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88A8;

/// Why a frame could not be turned into a [`DecodedPacket`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeError {
    UnsupportedLinkType(u32),
    NotIp,
    Truncated,
    Fragment,
    UnsupportedTransport(u8),
}

/// A frame with its IP and transport headers split out.
///
/// Header bytes are kept verbatim; scrubbing of addresses and ports happens
/// in [`DecodedPacket::scrubbed_header`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPacket {
    pub timestamp: f64,
    /// Observed direction, not normalized.
    pub tuple: FiveTuple,
    pub ip_header: Vec<u8>,
    pub transport_header: Vec<u8>,
    pub payload: Vec<u8>,
    pub captured_len: usize,
    pub checksums_ok: bool,
    pub tcp_seq: Option<u32>,
}

impl DecodedPacket {
    /// IP header without address fields followed by the transport header
    /// without port fields. Fields are excised, not zeroed.
    pub fn scrubbed_header(&self) -> Vec<u8> {
        let (addr_start, addr_end) = match self.tuple.src_ip {
            IpAddr::V4(_) => (12, 20),
            IpAddr::V6(_) => (8, 40),
        };
        let mut out = Vec::with_capacity(self.ip_header.len() + self.transport_header.len());
        out.extend_from_slice(&self.ip_header[..addr_start]);
        out.extend_from_slice(&self.ip_header[addr_end..]);
        out.extend_from_slice(&self.transport_header[4..]);
        out
    }
}

pub fn decode(link_type: u32, raw: &RawPacket) -> Result<DecodedPacket, DecodeError> {
    let data = &raw.data[..];
    let (ip, wire_len) = match link_type {
        LINKTYPE_ETHERNET => {
            let mut at = 12;
            let mut ethertype = be16(data, at)?;
            while ethertype == ETHERTYPE_VLAN || ethertype == ETHERTYPE_QINQ {
                at += 4;
                ethertype = be16(data, at)?;
            }
            at += 2;
            if ethertype != ETHERTYPE_IPV4 && ethertype != ETHERTYPE_IPV6 {
                return Err(DecodeError::NotIp);
            }
            (&data[at..], (raw.orig_len as usize).saturating_sub(at))
        }
        LINKTYPE_LINUX_SLL => {
            let ethertype = be16(data, 14)?;
            if ethertype != ETHERTYPE_IPV4 && ethertype != ETHERTYPE_IPV6 {
                return Err(DecodeError::NotIp);
            }
            (&data[16..], (raw.orig_len as usize).saturating_sub(16))
        }
        LINKTYPE_RAW | LINKTYPE_IPV4 | LINKTYPE_IPV6 => (data, raw.orig_len as usize),
        other => return Err(DecodeError::UnsupportedLinkType(other)),
    };
    match ip.first().map(|b| b >> 4) {
        Some(4) => decode_ipv4(raw.timestamp, ip, wire_len),
        Some(6) => decode_ipv6(raw.timestamp, ip, wire_len),
        Some(_) => Err(DecodeError::NotIp),
        None => Err(DecodeError::Truncated),
    }
}

fn decode_ipv4(timestamp: f64, ip: &[u8], wire_len: usize) -> Result<DecodedPacket, DecodeError> {
    if ip.len() < 20 {
        return Err(DecodeError::Truncated);
    }
    let ihl = (ip[0] & 0x0F) as usize * 4;
    if ihl < 20 || ip.len() < ihl {
        return Err(DecodeError::Truncated);
    }
    let total_len = be16(ip, 2)? as usize;
    if total_len < ihl {
        return Err(DecodeError::Truncated);
    }
    let flags_frag = be16(ip, 6)?;
    if flags_frag & 0x3FFF != 0 {
        return Err(DecodeError::Fragment);
    }
    let protocol = ip[9];
    let src = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
    // Drop link-layer padding past the IP datagram.
    let datagram = &ip[..ip.len().min(total_len)];
    let complete = datagram.len() == total_len && wire_len >= total_len;
    let header_ok = fold_checksum(sum_words(&ip[..ihl], 0)) == 0xFFFF;

    let mut pseudo = sum_words(&ip[12..20], 0);
    pseudo += protocol as u32;
    pseudo += (total_len - ihl) as u32;
    transport(
        timestamp,
        IpAddr::V4(src),
        IpAddr::V4(dst),
        protocol,
        &ip[..ihl],
        &datagram[ihl..],
        complete,
        header_ok,
        pseudo,
        true,
    )
}

fn decode_ipv6(timestamp: f64, ip: &[u8], wire_len: usize) -> Result<DecodedPacket, DecodeError> {
    if ip.len() < 40 {
        return Err(DecodeError::Truncated);
    }
    let payload_len = be16(ip, 4)? as usize;
    let next = ip[6];
    let addr = |at: usize| {
        let octets: [u8; 16] = ip[at..at + 16].try_into().unwrap();
        Ipv6Addr::from(octets)
    };
    let total_len = 40 + payload_len;
    let datagram = &ip[..ip.len().min(total_len)];
    let complete = datagram.len() == total_len && wire_len >= total_len;

    let mut pseudo = sum_words(&ip[8..40], 0);
    pseudo += next as u32;
    pseudo += payload_len as u32;
    transport(
        timestamp,
        IpAddr::V6(addr(8)),
        IpAddr::V6(addr(24)),
        next,
        &ip[..40],
        &datagram[40..],
        complete,
        true,
        pseudo,
        false,
    )
}

#[allow(clippy::too_many_arguments)]
fn transport(
    timestamp: f64,
    src_ip: IpAddr,
    dst_ip: IpAddr,
    protocol: u8,
    ip_header: &[u8],
    segment: &[u8],
    complete: bool,
    ip_ok: bool,
    pseudo_sum: u32,
    udp_zero_allowed: bool,
) -> Result<DecodedPacket, DecodeError> {
    let header_len = match protocol {
        PROTO_TCP => {
            if segment.len() < 20 {
                return Err(DecodeError::Truncated);
            }
            let off = (segment[12] >> 4) as usize * 4;
            if off < 20 || segment.len() < off {
                return Err(DecodeError::Truncated);
            }
            off
        }
        PROTO_UDP => {
            if segment.len() < 8 {
                return Err(DecodeError::Truncated);
            }
            8
        }
        other => return Err(DecodeError::UnsupportedTransport(other)),
    };
    let src_port = be16(segment, 0)?;
    let dst_port = be16(segment, 2)?;

    // Transport checksums are only verifiable on fully captured segments.
    let transport_ok = if !complete {
        true
    } else if protocol == PROTO_UDP && udp_zero_allowed && be16(segment, 6)? == 0 {
        true
    } else {
        fold_checksum(sum_words(segment, pseudo_sum)) == 0xFFFF
    };
    let tcp_seq = (protocol == PROTO_TCP)
        .then(|| u32::from_be_bytes(segment[4..8].try_into().unwrap()));

    Ok(DecodedPacket {
        timestamp,
        tuple: FiveTuple {
            src_ip,
            dst_ip,
            src_port,
            dst_port,
            protocol,
        },
        ip_header: ip_header.to_vec(),
        transport_header: segment[..header_len].to_vec(),
        payload: segment[header_len..].to_vec(),
        captured_len: ip_header.len() + segment.len(),
        checksums_ok: ip_ok && transport_ok,
        tcp_seq,
    })
}

fn be16(data: &[u8], at: usize) -> Result<u16, DecodeError> {
    data.get(at..at + 2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .ok_or(DecodeError::Truncated)
}

/// Ones'-complement sum of big-endian 16-bit words, unfolded.
pub(crate) fn sum_words(data: &[u8], initial: u32) -> u32 {
    let mut sum = initial as u64;
    let mut chunks = data.chunks_exact(2);
    for c in &mut chunks {
        sum += u16::from_be_bytes([c[0], c[1]]) as u64;
    }
    if let [last] = chunks.remainder() {
        sum += (*last as u64) << 8;
    }
    while sum > 0xFFFF_FFFF {
        sum = (sum & 0xFFFF_FFFF) + (sum >> 32);
    }
    sum as u32
}

pub(crate) fn fold_checksum(mut sum: u32) -> u16 {
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    sum as u16
}

/// Value to store in a checksum field whose contents summed to `sum` with
/// the field zeroed.
pub(crate) fn checksum_field(sum: u32) -> u16 {
    !fold_checksum(sum)
}
