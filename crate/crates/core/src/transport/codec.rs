//! Datagram envelope.
//!
//! ```text
//!  0        1        2               6               10       12
//! +--------+--------+---------------+---------------+--------+---------
//! |version |  kind  | sender (u32)  | cycle_id (u32)|len(u16)| payload
//! +--------+--------+---------------+---------------+--------+---------
//! ```
//!
//! All integers are big-endian. A frame never exceeds [`MAX_DATAGRAM`] bytes.

use std::fmt;

use super::TransportError;

pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 12;
pub const MAX_DATAGRAM: usize = 8192;
pub const MAX_PAYLOAD: usize = MAX_DATAGRAM - HEADER_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageKind {
    Ping = 1,
    Pong = 2,
    RegisterAck = 3,
    DataSubmit = 4,
    SegmentAssign = 5,
    ReduceResult = 6,
    CycleSuccess = 7,
    CycleAbort = 8,
}

impl MessageKind {
    pub const ALL: [MessageKind; 8] = [
        MessageKind::Ping,
        MessageKind::Pong,
        MessageKind::RegisterAck,
        MessageKind::DataSubmit,
        MessageKind::SegmentAssign,
        MessageKind::ReduceResult,
        MessageKind::CycleSuccess,
        MessageKind::CycleAbort,
    ];

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| *k as u8 == b)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Ping => "PING",
            MessageKind::Pong => "PONG",
            MessageKind::RegisterAck => "REGISTER_ACK",
            MessageKind::DataSubmit => "DATA_SUBMIT",
            MessageKind::SegmentAssign => "SEGMENT_ASSIGN",
            MessageKind::ReduceResult => "REDUCE_RESULT",
            MessageKind::CycleSuccess => "CYCLE_SUCCESS",
            MessageKind::CycleAbort => "CYCLE_ABORT",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub version: u8,
    pub kind: MessageKind,
    pub sender: u32,
    pub cycle_id: u32,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(kind: MessageKind, sender: u32, cycle_id: u32, payload: impl Into<Vec<u8>>) -> Self {
        Message {
            version: PROTOCOL_VERSION,
            kind,
            sender,
            cycle_id,
            payload: payload.into(),
        }
    }

    pub fn payload_str(&self) -> Option<&str> {
        std::str::from_utf8(&self.payload).ok()
    }
}

pub fn encode_message(m: &Message) -> Result<Vec<u8>, TransportError> {
    if m.payload.len() > MAX_PAYLOAD {
        return Err(TransportError::PayloadTooLarge(m.payload.len()));
    }
    if m.version != PROTOCOL_VERSION {
        return Err(TransportError::Malformed(format!(
            "unsupported version {}",
            m.version
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + m.payload.len());
    out.push(m.version);
    out.push(m.kind as u8);
    out.extend_from_slice(&m.sender.to_be_bytes());
    out.extend_from_slice(&m.cycle_id.to_be_bytes());
    out.extend_from_slice(&(m.payload.len() as u16).to_be_bytes());
    out.extend_from_slice(&m.payload);
    Ok(out)
}

pub fn decode_message(b: &[u8]) -> Result<Message, TransportError> {
    let malformed = |why: String| Err(TransportError::Malformed(why));
    if b.len() < HEADER_LEN {
        return malformed(format!(
            "frame of {} bytes is shorter than the header",
            b.len()
        ));
    }
    if b[0] != PROTOCOL_VERSION {
        return malformed(format!("unsupported version {}", b[0]));
    }
    let Some(kind) = MessageKind::from_byte(b[1]) else {
        return malformed(format!("unknown kind {}", b[1]));
    };
    let sender = u32::from_be_bytes([b[2], b[3], b[4], b[5]]);
    let cycle_id = u32::from_be_bytes([b[6], b[7], b[8], b[9]]);
    let len = usize::from(u16::from_be_bytes([b[10], b[11]]));
    if b.len() != HEADER_LEN + len {
        return malformed(format!(
            "payload_len {len} but {} payload bytes present",
            b.len() - HEADER_LEN
        ));
    }
    Ok(Message {
        version: b[0],
        kind,
        sender,
        cycle_id,
        payload: b[HEADER_LEN..].to_vec(),
    })
}
