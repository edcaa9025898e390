//! Fixed 27-byte chunk header. All multi-byte fields are little-endian.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "GSYN"
//!      4     1  version (1)
//!      5     1  msg_type
//!      6     8  request_tag
//!     14     4  chunk_index
//!     18     4  total_chunks
//!     22     1  dtype
//!     23     4  payload_len
//! ```

use std::io::{Read, Write};

use super::TransportError;
use crate::profile::Precision;

pub const MAGIC: [u8; 4] = *b"GSYN";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 27;
/// Upper bound on a single payload; anything larger is treated as corruption.
pub const MAX_PAYLOAD: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Chunk = 1,
    /// Orderly close; the peer sends nothing after it.
    Close = 2,
}

impl MsgType {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(MsgType::Chunk),
            2 => Some(MsgType::Close),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WireHeader {
    pub msg_type: MsgType,
    pub request_tag: u64,
    pub chunk_index: u32,
    pub total_chunks: u32,
    pub dtype: Precision,
    pub payload_len: u32,
}

impl WireHeader {
    pub fn chunk(request_tag: u64, chunk_index: u32, total_chunks: u32, dtype: Precision, payload_len: u32) -> Self {
        WireHeader {
            msg_type: MsgType::Chunk,
            request_tag,
            chunk_index,
            total_chunks,
            dtype,
            payload_len,
        }
    }

    pub fn close() -> Self {
        WireHeader {
            msg_type: MsgType::Close,
            request_tag: 0,
            chunk_index: 0,
            total_chunks: 0,
            dtype: Precision::Fp32,
            payload_len: 0,
        }
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4] = VERSION;
        out[5] = self.msg_type as u8;
        out[6..14].copy_from_slice(&self.request_tag.to_le_bytes());
        out[14..18].copy_from_slice(&self.chunk_index.to_le_bytes());
        out[18..22].copy_from_slice(&self.total_chunks.to_le_bytes());
        out[22] = self.dtype.wire_code();
        out[23..27].copy_from_slice(&self.payload_len.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8; HEADER_LEN]) -> Result<Self, TransportError> {
        let corrupt = |msg: String| Err(TransportError::HeaderCorrupt(msg));
        if bytes[0..4] != MAGIC {
            return corrupt(format!("bad magic {:02x?}", &bytes[0..4]));
        }
        if bytes[4] != VERSION {
            return corrupt(format!("unsupported version {}", bytes[4]));
        }
        let Some(msg_type) = MsgType::from_u8(bytes[5]) else {
            return corrupt(format!("unknown message type {}", bytes[5]));
        };
        let Some(dtype) = Precision::from_wire_code(bytes[22]) else {
            return corrupt(format!("unknown dtype {}", bytes[22]));
        };
        let u32_at = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let payload_len = u32_at(23);
        if payload_len > MAX_PAYLOAD {
            return corrupt(format!("payload length {payload_len} too large"));
        }
        Ok(WireHeader {
            msg_type,
            request_tag: u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")),
            chunk_index: u32_at(14),
            total_chunks: u32_at(18),
            dtype,
            payload_len,
        })
    }
}

/// Writes header and payload. `write_all` resumes partial writes.
pub fn send_chunk<W: Write>(w: &mut W, header: &WireHeader, payload: &[u8]) -> Result<(), TransportError> {
    if payload.len() != header.payload_len as usize {
        return Err(TransportError::HeaderCorrupt(format!(
            "payload_len {} but {} payload bytes",
            header.payload_len,
            payload.len()
        )));
    }
    w.write_all(&header.encode())?;
    w.write_all(payload)?;
    Ok(())
}

/// Reads one header and its payload. A clean end of stream before the
/// header reports `PeerClosed`.
pub fn recv_chunk<R: Read>(r: &mut R, peer: usize) -> Result<(WireHeader, Vec<u8>), TransportError> {
    let mut head = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut head[filled..]) {
            Ok(0) => return Err(TransportError::PeerClosed { peer }),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let header = WireHeader::decode(&head)?;
    let mut payload = vec![0u8; header.payload_len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TransportError::PeerClosed { peer },
        _ => e.into(),
    })?;
    Ok((header, payload))
}
