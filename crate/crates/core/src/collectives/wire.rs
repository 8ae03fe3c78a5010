//! Byte-exact wire format for collective frames.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic   "BPAR"
//! 4       1     version (currently 1)
//! 5       1     opcode  1=allreduce 2=broadcast 3=barrier 4=allgather_stats
//! 6       4     rank    u32
//! 10      4     sequence u32
//! 14      8     payload_len u64 (bytes, multiple of 8)
//! 22      ...   payload: little-endian IEEE 754 f64 array
//! ```
//!
//! Rendezvous uses a separate 13-byte preamble (see `socket.rs`), not a
//! `WireMessage`.

use super::CollectiveError;

pub const MAGIC: [u8; 4] = *b"BPAR";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Allreduce = 1,
    Broadcast = 2,
    Barrier = 3,
    AllgatherStats = 4,
}

impl Opcode {
    pub fn from_byte(b: u8) -> Result<Self, CollectiveError> {
        match b {
            1 => Ok(Opcode::Allreduce),
            2 => Ok(Opcode::Broadcast),
            3 => Ok(Opcode::Barrier),
            4 => Ok(Opcode::AllgatherStats),
            other => Err(CollectiveError::Protocol(format!(
                "unknown opcode byte {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub opcode: Opcode,
    pub rank: u32,
    pub sequence: u32,
    pub payload: Vec<f64>,
}

impl WireMessage {
    pub fn new(opcode: Opcode, rank: u32, sequence: u32, payload: Vec<f64>) -> Self {
        WireMessage {
            opcode,
            rank,
            sequence,
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload_bytes = self.payload.len() * 8;
        let mut out = Vec::with_capacity(HEADER_LEN + payload_bytes);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.opcode as u8);
        out.extend_from_slice(&self.rank.to_le_bytes());
        out.extend_from_slice(&self.sequence.to_le_bytes());
        out.extend_from_slice(&(payload_bytes as u64).to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode_header(header: &[u8; HEADER_LEN]) -> Result<(Opcode, u32, u32, u64), CollectiveError> {
        if header[0..4] != MAGIC {
            return Err(CollectiveError::Protocol(format!(
                "bad magic {:?}",
                &header[0..4]
            )));
        }
        if header[4] != VERSION {
            return Err(CollectiveError::Protocol(format!(
                "unsupported version {}",
                header[4]
            )));
        }
        let opcode = Opcode::from_byte(header[5])?;
        let rank = u32::from_le_bytes(header[6..10].try_into().unwrap());
        let sequence = u32::from_le_bytes(header[10..14].try_into().unwrap());
        let payload_len = u64::from_le_bytes(header[14..22].try_into().unwrap());
        if payload_len % 8 != 0 {
            return Err(CollectiveError::Protocol(format!(
                "payload length {payload_len} is not a multiple of 8"
            )));
        }
        Ok((opcode, rank, sequence, payload_len))
    }

    pub fn decode_payload(bytes: &[u8]) -> Vec<f64> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CollectiveError> {
        if bytes.len() < HEADER_LEN {
            return Err(CollectiveError::Protocol(format!(
                "frame too short: {} bytes",
                bytes.len()
            )));
        }
        let header: [u8; HEADER_LEN] = bytes[..HEADER_LEN].try_into().unwrap();
        let (opcode, rank, sequence, payload_len) = Self::decode_header(&header)?;
        if bytes.len() != HEADER_LEN + payload_len as usize {
            return Err(CollectiveError::Protocol(format!(
                "frame length {} does not match header payload_len {payload_len}",
                bytes.len()
            )));
        }
        Ok(WireMessage {
            opcode,
            rank,
            sequence,
            payload: Self::decode_payload(&bytes[HEADER_LEN..]),
        })
    }
}
