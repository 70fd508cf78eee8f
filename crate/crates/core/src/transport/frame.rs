//! Binary wire format.
//!
//! ```text
//! "SCTC" | version u8 | kind u8 | round u32 LE | sender u32 LE | l u8 | l_f u8 | payload_len u64 LE | elements
//! ```
//!
//! `payload_len` counts elements. Each element is written little-endian in
//! 8 bytes when `l <= 64` and in 16 bytes otherwise. Frames without a
//! payload carry `l = l_f = 0` and `payload_len = 0`, so they are exactly
//! [`HEADER_LEN`] bytes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ring::{FixedPointConfig, RingError, RingVector};

pub const MAGIC: [u8; 4] = *b"SCTC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 24;
pub const MAX_PAYLOAD_ELEMENTS: u64 = 1 << 26;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("payload of {len} elements exceeds the frame limit or the available bytes")]
    LengthOverrun { len: u64 },
    #[error("frame truncated: need {needed} bytes, have {available}")]
    TruncatedFrame { needed: usize, available: usize },
    #[error("{0:?} frames carry no payload")]
    UnexpectedPayload(MessageKind),
    #[error("{0:?} frames need a payload")]
    MissingPayload(MessageKind),
    #[error("invalid ring parameters in header: {0}")]
    BadConfig(RingError),
    #[error("element {index} does not fit the declared ring")]
    ValueOutOfRange { index: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    ShareUpload = 1,
    SigmaBroadcast = 2,
    RoundBegin = 3,
    RoundComplete = 4,
    Abort = 5,
}

impl MessageKind {
    pub const ALL: [MessageKind; 5] = [
        MessageKind::ShareUpload,
        MessageKind::SigmaBroadcast,
        MessageKind::RoundBegin,
        MessageKind::RoundComplete,
        MessageKind::Abort,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self, FrameError> {
        Self::ALL
            .into_iter()
            .find(|k| k.code() == code)
            .ok_or(FrameError::UnknownKind(code))
    }

    pub fn has_payload(self) -> bool {
        matches!(self, MessageKind::ShareUpload | MessageKind::SigmaBroadcast)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    kind: MessageKind,
    round: u32,
    sender: u32,
    payload: Option<RingVector>,
}

impl Message {
    pub fn new(kind: MessageKind, round: u32, sender: u32, payload: Option<RingVector>) -> Result<Self, FrameError> {
        match (kind.has_payload(), payload.is_some()) {
            (true, false) => Err(FrameError::MissingPayload(kind)),
            (false, true) => Err(FrameError::UnexpectedPayload(kind)),
            _ => Ok(Self {
                kind,
                round,
                sender,
                payload,
            }),
        }
    }

    pub fn control(kind: MessageKind, round: u32, sender: u32) -> Result<Self, FrameError> {
        Self::new(kind, round, sender, None)
    }

    pub fn kind(&self) -> MessageKind {
        self.kind
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn sender(&self) -> u32 {
        self.sender
    }

    pub fn payload(&self) -> Option<&RingVector> {
        self.payload.as_ref()
    }

    pub fn into_payload(self) -> Option<RingVector> {
        self.payload
    }

    pub fn frame_len(&self) -> usize {
        HEADER_LEN
            + self
                .payload
                .as_ref()
                .map_or(0, |p| p.len() * element_width(p.cfg().ring_bits()))
    }
}

pub fn element_width(l: u32) -> usize {
    if l <= 64 {
        8
    } else {
        16
    }
}

pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(msg.frame_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.kind.code());
    out.extend_from_slice(&msg.round.to_le_bytes());
    out.extend_from_slice(&msg.sender.to_le_bytes());
    match &msg.payload {
        None => {
            out.extend_from_slice(&[0, 0]);
            out.extend_from_slice(&0u64.to_le_bytes());
        }
        Some(p) => {
            let cfg = p.cfg();
            out.push(cfg.ring_bits() as u8);
            out.push(cfg.frac_bits() as u8);
            out.extend_from_slice(&(p.len() as u64).to_le_bytes());
            let width = element_width(cfg.ring_bits());
            for v in p.as_slice() {
                out.extend_from_slice(&v.to_le_bytes()[..width]);
            }
        }
    }
    out
}

/// Parsed fixed-size header.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameHeader {
    pub kind: MessageKind,
    pub round: u32,
    pub sender: u32,
    pub l: u8,
    pub frac_bits: u8,
    pub payload_len: u64,
}

impl FrameHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < HEADER_LEN {
            return Err(FrameError::TruncatedFrame {
                needed: HEADER_LEN,
                available: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(FrameError::BadMagic(magic));
        }
        if bytes[4] != VERSION {
            return Err(FrameError::UnsupportedVersion(bytes[4]));
        }
        let kind = MessageKind::from_code(bytes[5])?;
        let header = Self {
            kind,
            round: u32::from_le_bytes(bytes[6..10].try_into().unwrap()),
            sender: u32::from_le_bytes(bytes[10..14].try_into().unwrap()),
            l: bytes[14],
            frac_bits: bytes[15],
            payload_len: u64::from_le_bytes(bytes[16..24].try_into().unwrap()),
        };
        if header.payload_len > MAX_PAYLOAD_ELEMENTS {
            return Err(FrameError::LengthOverrun {
                len: header.payload_len,
            });
        }
        if !kind.has_payload() && (header.l, header.frac_bits, header.payload_len) != (0, 0, 0) {
            return Err(FrameError::UnexpectedPayload(kind));
        }
        Ok(header)
    }

    pub fn frame_len(&self) -> usize {
        if self.kind.has_payload() {
            HEADER_LEN + self.payload_len as usize * element_width(self.l as u32)
        } else {
            HEADER_LEN
        }
    }
}

/// Decodes the frame at the start of `bytes`, returning it with its length.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Message, usize), FrameError> {
    let h = FrameHeader::parse(bytes)?;
    let len = h.frame_len();
    if bytes.len() < len {
        return Err(FrameError::TruncatedFrame {
            needed: len,
            available: bytes.len(),
        });
    }
    if !h.kind.has_payload() {
        return Ok((Message::control(h.kind, h.round, h.sender)?, len));
    }
    let cfg = FixedPointConfig::new(h.l as u32, h.frac_bits as u32).map_err(FrameError::BadConfig)?;
    let width = element_width(cfg.ring_bits());
    let mut elems = Vec::with_capacity(h.payload_len as usize);
    for (index, chunk) in bytes[HEADER_LEN..len].chunks_exact(width).enumerate() {
        let mut buf = [0u8; 16];
        buf[..width].copy_from_slice(chunk);
        let v = u128::from_le_bytes(buf);
        if v != cfg.reduce(v) {
            return Err(FrameError::ValueOutOfRange { index });
        }
        elems.push(v);
    }
    let payload = RingVector::from_values(cfg, elems).map_err(FrameError::BadConfig)?;
    Ok((Message::new(h.kind, h.round, h.sender, Some(payload))?, len))
}

/// Decodes exactly one frame; trailing bytes are a length error.
pub fn decode_frame(bytes: &[u8]) -> Result<Message, FrameError> {
    let (msg, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FrameError::LengthOverrun {
            len: (bytes.len() - HEADER_LEN) as u64,
        });
    }
    Ok(msg)
}

/// Incremental splitter for a byte stream carrying back-to-back frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete frame's raw bytes, or `None` if only a partial frame is buffered.
    pub fn next_frame(&mut self) -> Result<Option<Vec<u8>>, FrameError> {
        if self.buf.len() < HEADER_LEN {
            return Ok(None);
        }
        let len = FrameHeader::parse(&self.buf)?.frame_len();
        if self.buf.len() < len {
            return Ok(None);
        }
        let rest = self.buf.split_off(len);
        Ok(Some(std::mem::replace(&mut self.buf, rest)))
    }

    pub fn next_message(&mut self) -> Result<Option<Message>, FrameError> {
        self.next_frame()?.map(|f| decode_frame(&f)).transpose()
    }
}
