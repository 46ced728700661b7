//! Classic libpcap capture files (not pcapng).

use std::io::{self, Write};
use std::path::Path;

use super::IngestError;

pub const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
pub const MAGIC_NANOS: u32 = 0xA1B2_3C4D;

pub const LINKTYPE_ETHERNET: u32 = 1;
pub const LINKTYPE_RAW: u32 = 101;
pub const LINKTYPE_LINUX_SLL: u32 = 113;
pub const LINKTYPE_IPV4: u32 = 228;
pub const LINKTYPE_IPV6: u32 = 229;

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
/// Larger records are treated as corruption rather than allocated.
const MAX_RECORD_LEN: usize = 1 << 18;

/// One link-layer frame as stored in the capture.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPacket {
    pub timestamp: f64,
    pub data: Vec<u8>,
    /// Length of the frame on the wire; `data` may be shorter (snaplen).
    pub orig_len: u32,
    /// Position in the file, from 0.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub link_type: u32,
    pub packets: Vec<RawPacket>,
    /// Malformed records that ended the walk early (0 or 1).
    pub warnings: usize,
}

pub fn parse_capture(path: &Path) -> Result<Capture, IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_capture_bytes(&bytes)
}

pub fn parse_capture_bytes(bytes: &[u8]) -> Result<Capture, IngestError> {
    if bytes.len() < 4 {
        return Err(IngestError::TruncatedHeader);
    }
    let le = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let (little, nanos) = match (le, be) {
        (MAGIC_MICROS, _) => (true, false),
        (MAGIC_NANOS, _) => (true, true),
        (_, MAGIC_MICROS) => (false, false),
        (_, MAGIC_NANOS) => (false, true),
        _ => return Err(IngestError::UnknownMagic { magic: le }),
    };
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(IngestError::TruncatedHeader);
    }
    let read_u32 = |at: usize| {
        let raw: [u8; 4] = bytes[at..at + 4].try_into().unwrap();
        if little {
            u32::from_le_bytes(raw)
        } else {
            u32::from_be_bytes(raw)
        }
    };
    let link_type = read_u32(20);
    let frac_scale = if nanos { 1e-9 } else { 1e-6 };

    let mut packets = Vec::new();
    let mut warnings = 0;
    let mut at = GLOBAL_HEADER_LEN;
    while at < bytes.len() {
        if bytes.len() - at < RECORD_HEADER_LEN {
            warnings += 1;
            break;
        }
        let ts_sec = read_u32(at);
        let ts_frac = read_u32(at + 4);
        let incl_len = read_u32(at + 8) as usize;
        let orig_len = read_u32(at + 12);
        let body = at + RECORD_HEADER_LEN;
        if incl_len > MAX_RECORD_LEN || bytes.len() - body < incl_len {
            warnings += 1;
            break;
        }
        packets.push(RawPacket {
            timestamp: ts_sec as f64 + ts_frac as f64 * frac_scale,
            data: bytes[body..body + incl_len].to_vec(),
            orig_len,
            index: packets.len(),
        });
        at = body + incl_len;
    }
    if warnings > 0 {
        log::warn!(
            "capture truncated after {} records; trailing bytes skipped",
            packets.len()
        );
    }

    Ok(Capture {
        link_type,
        packets,
        warnings,
    })
}

/// Little-endian, microsecond-resolution pcap writer.
pub struct PcapWriter<W: Write> {
    out: W,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut out: W, link_type: u32) -> io::Result<Self> {
        out.write_all(&MAGIC_MICROS.to_le_bytes())?;
        out.write_all(&2u16.to_le_bytes())?;
        out.write_all(&4u16.to_le_bytes())?;
        out.write_all(&0i32.to_le_bytes())?;
        out.write_all(&0u32.to_le_bytes())?;
        out.write_all(&65535u32.to_le_bytes())?;
        out.write_all(&link_type.to_le_bytes())?;
        Ok(Self { out })
    }

    pub fn write_packet(&mut self, timestamp_micros: u64, frame: &[u8]) -> io::Result<()> {
        let secs = (timestamp_micros / 1_000_000) as u32;
        let micros = (timestamp_micros % 1_000_000) as u32;
        self.out.write_all(&secs.to_le_bytes())?;
        self.out.write_all(&micros.to_le_bytes())?;
        self.out.write_all(&(frame.len() as u32).to_le_bytes())?;
        self.out.write_all(&(frame.len() as u32).to_le_bytes())?;
        self.out.write_all(frame)
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
