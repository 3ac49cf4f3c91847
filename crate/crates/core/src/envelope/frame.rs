//! Frame envelope and its binary wire codec.
//!
//! Layout (all integers big-endian):
//!
//! ```text
//! magic "MROS" (4) | version (1) | kind (1) | payload_type (1) | flags (1)
//! sequence (8) | timestamp_send (8) | topic_len (2) | topic
//! correlation (16) | payload_len (4) | payload
//! ```
//!
//! The fixed part is [`HEADER_LEN`] bytes, so an encoded frame always takes
//! `HEADER_LEN + topic.len() + payload.len()` bytes. Frames are
//! self-delimiting, which lets stream transports write them back to back.

use std::fmt;
use std::io::{self, Read};

use bytes::Bytes;
use thiserror::Error;

use super::payload::PayloadType;

pub const MAGIC: [u8; 4] = *b"MROS";
pub const VERSION: u8 = 0x01;
/// Size of every fixed-width field of a frame combined.
pub const HEADER_LEN: usize = 46;
pub const MAX_TOPIC_LEN: usize = u16::MAX as usize;
pub const MAX_PAYLOAD_LEN: usize = u32::MAX as usize;

/// Bytes up to and including `topic_len`.
const PREFIX_LEN: usize = 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum FrameKind {
    Data = 0,
    SvcReq = 1,
    SvcResp = 2,
    ActionGoal = 3,
    ActionFeedback = 4,
    ActionResult = 5,
    ActionCancel = 6,
    Ack = 7,
    Heartbeat = 8,
    Sub = 9,
    Unsub = 10,
    Advertise = 11,
    InfoReq = 12,
    InfoResp = 13,
}

impl FrameKind {
    pub const ALL: [FrameKind; 14] = [
        FrameKind::Data,
        FrameKind::SvcReq,
        FrameKind::SvcResp,
        FrameKind::ActionGoal,
        FrameKind::ActionFeedback,
        FrameKind::ActionResult,
        FrameKind::ActionCancel,
        FrameKind::Ack,
        FrameKind::Heartbeat,
        FrameKind::Sub,
        FrameKind::Unsub,
        FrameKind::Advertise,
        FrameKind::InfoReq,
        FrameKind::InfoResp,
    ];

    pub fn from_u8(tag: u8) -> Option<FrameKind> {
        Self::ALL.get(tag as usize).copied()
    }

    /// Service and action frames must carry a nonzero correlation id.
    pub fn requires_correlation(self) -> bool {
        matches!(
            self,
            FrameKind::SvcReq
                | FrameKind::SvcResp
                | FrameKind::ActionGoal
                | FrameKind::ActionFeedback
                | FrameKind::ActionResult
                | FrameKind::ActionCancel
        )
    }
}

impl fmt::Display for FrameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameKind::Data => "DATA",
            FrameKind::SvcReq => "SVC_REQ",
            FrameKind::SvcResp => "SVC_RESP",
            FrameKind::ActionGoal => "ACTION_GOAL",
            FrameKind::ActionFeedback => "ACTION_FEEDBACK",
            FrameKind::ActionResult => "ACTION_RESULT",
            FrameKind::ActionCancel => "ACTION_CANCEL",
            FrameKind::Ack => "ACK",
            FrameKind::Heartbeat => "HEARTBEAT",
            FrameKind::Sub => "SUB",
            FrameKind::Unsub => "UNSUB",
            FrameKind::Advertise => "ADVERTISE",
            FrameKind::InfoReq => "INFO_REQ",
            FrameKind::InfoResp => "INFO_RESP",
        })
    }
}

/// Per-frame flag byte. Only the two low bits are defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Flags(u8);

impl Flags {
    pub const NONE: Flags = Flags(0);
    pub const REQUIRES_ACK: Flags = Flags(0b01);
    pub const ERROR_RESPONSE: Flags = Flags(0b10);
    const DEFINED: u8 = 0b11;

    pub fn from_bits(bits: u8) -> Option<Flags> {
        (bits & !Self::DEFINED == 0).then_some(Flags(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, other: Flags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn requires_ack(self) -> bool {
        self.contains(Self::REQUIRES_ACK)
    }

    pub fn is_error(self) -> bool {
        self.contains(Self::ERROR_RESPONSE)
    }
}

impl std::ops::BitOr for Flags {
    type Output = Flags;
    fn bitor(self, rhs: Flags) -> Flags {
        Flags(self.0 | rhs.0)
    }
}

/// 16 opaque bytes pairing requests with replies (and naming publishers,
/// goals and subscriptions). All-zero means "unused".
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Correlation(pub [u8; 16]);

impl Correlation {
    pub const ZERO: Correlation = Correlation([0; 16]);

    pub fn is_zero(&self) -> bool {
        self.0 == [0; 16]
    }

    pub fn from_u128(v: u128) -> Correlation {
        Correlation(v.to_be_bytes())
    }

    pub fn as_u128(&self) -> u128 {
        u128::from_be_bytes(self.0)
    }
}

impl fmt::Debug for Correlation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Correlation({:032x})", self.as_u128())
    }
}

impl fmt::Display for Correlation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.as_u128())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub payload_type: PayloadType,
    pub flags: Flags,
    pub sequence: u64,
    /// Nanoseconds since the Unix epoch at send time.
    pub timestamp_send: u64,
    pub topic: String,
    pub correlation: Correlation,
    pub payload: Bytes,
}

impl Frame {
    pub fn new(kind: FrameKind, topic: impl Into<String>) -> Frame {
        Frame {
            kind,
            payload_type: PayloadType::Null,
            flags: Flags::NONE,
            sequence: 0,
            timestamp_send: 0,
            topic: topic.into(),
            correlation: Correlation::ZERO,
            payload: Bytes::new(),
        }
    }

    pub fn with_payload(mut self, payload_type: PayloadType, payload: impl Into<Bytes>) -> Frame {
        self.payload_type = payload_type;
        self.payload = payload.into();
        self
    }

    pub fn with_correlation(mut self, correlation: Correlation) -> Frame {
        self.correlation = correlation;
        self
    }

    pub fn with_sequence(mut self, sequence: u64) -> Frame {
        self.sequence = sequence;
        self
    }

    pub fn with_flags(mut self, flags: Flags) -> Frame {
        self.flags = flags;
        self
    }

    /// Exact number of bytes [`encode_frame`] produces for this frame.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.topic.len() + self.payload.len()
    }

    /// Checks every invariant `encode_frame` relies on.
    pub fn validate(&self) -> Result<(), CodecError> {
        if self.topic.len() > MAX_TOPIC_LEN {
            return Err(CodecError::TopicTooLong(self.topic.len()));
        }
        if self.payload.len() > MAX_PAYLOAD_LEN {
            return Err(CodecError::PayloadTooLong(self.payload.len()));
        }
        if self.topic.as_bytes().contains(&0) {
            return Err(CodecError::TopicContainsNul);
        }
        if self.kind.requires_correlation() && self.correlation.is_zero() {
            return Err(CodecError::MissingCorrelation(self.kind));
        }
        Ok(())
    }

    /// Error-flagged reply carrying a UTF-8 message.
    pub fn error_reply(kind: FrameKind, topic: &str, correlation: Correlation, message: &str) -> Frame {
        Frame::new(kind, topic)
            .with_correlation(correlation)
            .with_flags(Flags::ERROR_RESPONSE)
            .with_payload(PayloadType::StringUtf8, Bytes::copy_from_slice(message.as_bytes()))
    }

    /// Payload interpreted as an error message, when the frame is an error reply.
    pub fn error_message(&self) -> Option<String> {
        self.flags
            .is_error()
            .then(|| String::from_utf8_lossy(&self.payload).into_owned())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("topic is {0} bytes, limit is 65535")]
    TopicTooLong(usize),
    #[error("payload is {0} bytes, limit is 2^32-1")]
    PayloadTooLong(usize),
    #[error("topic contains a NUL byte")]
    TopicContainsNul,
    #[error("{0:?} frame requires a nonzero correlation id")]
    MissingCorrelation(FrameKind),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown frame kind tag {0}")]
    UnknownKind(u8),
    #[error("unknown payload type tag {0}")]
    UnknownPayloadType(u8),
    #[error("reserved flag bits set in {0:#04x}")]
    ReservedFlags(u8),
    #[error("topic is not valid UTF-8")]
    InvalidTopicUtf8,
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(frame.encoded_len());
    encode_frame_into(frame, &mut out)?;
    Ok(out)
}

/// Appends the encoding of `frame` to `out`.
pub fn encode_frame_into(frame: &Frame, out: &mut Vec<u8>) -> Result<(), CodecError> {
    frame.validate()?;
    out.reserve(frame.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.kind as u8);
    out.push(frame.payload_type as u8);
    out.push(frame.flags.bits());
    out.extend_from_slice(&frame.sequence.to_be_bytes());
    out.extend_from_slice(&frame.timestamp_send.to_be_bytes());
    out.extend_from_slice(&(frame.topic.len() as u16).to_be_bytes());
    out.extend_from_slice(frame.topic.as_bytes());
    out.extend_from_slice(&frame.correlation.0);
    out.extend_from_slice(&(frame.payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&frame.payload);
    Ok(())
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, CodecError> {
    let (frame, used) = decode_frame_prefix(bytes)?;
    if used != bytes.len() {
        return Err(CodecError::TrailingBytes(bytes.len() - used));
    }
    Ok(frame)
}

/// Decodes the frame at the start of `bytes`, returning it with the number
/// of bytes consumed.
pub fn decode_frame_prefix(bytes: &[u8]) -> Result<(Frame, usize), CodecError> {
    let need = |needed: usize| {
        if bytes.len() < needed {
            Err(CodecError::Truncated {
                needed,
                available: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(PREFIX_LEN)?;
    let fixed = parse_fixed(&bytes[..PREFIX_LEN])?;
    let topic_end = PREFIX_LEN + fixed.topic_len;
    need(topic_end + 20)?;
    let payload_len = u32::from_be_bytes(bytes[topic_end + 16..topic_end + 20].try_into().unwrap()) as usize;
    let end = topic_end + 20 + payload_len;
    need(end)?;
    let topic = std::str::from_utf8(&bytes[PREFIX_LEN..topic_end]).map_err(|_| CodecError::InvalidTopicUtf8)?;
    let correlation = Correlation(bytes[topic_end..topic_end + 16].try_into().unwrap());
    let frame = fixed.finish(
        topic.to_owned(),
        correlation,
        Bytes::copy_from_slice(&bytes[topic_end + 20..end]),
    )?;
    Ok((frame, end))
}

struct FixedPart {
    kind: FrameKind,
    payload_type: PayloadType,
    flags: Flags,
    sequence: u64,
    timestamp_send: u64,
    topic_len: usize,
}

impl FixedPart {
    fn finish(self, topic: String, correlation: Correlation, payload: Bytes) -> Result<Frame, CodecError> {
        let frame = Frame {
            kind: self.kind,
            payload_type: self.payload_type,
            flags: self.flags,
            sequence: self.sequence,
            timestamp_send: self.timestamp_send,
            topic,
            correlation,
            payload,
        };
        frame.validate()?;
        Ok(frame)
    }
}

fn parse_fixed(b: &[u8]) -> Result<FixedPart, CodecError> {
    let magic: [u8; 4] = b[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(CodecError::BadMagic(magic));
    }
    if b[4] != VERSION {
        return Err(CodecError::UnsupportedVersion(b[4]));
    }
    let kind = FrameKind::from_u8(b[5]).ok_or(CodecError::UnknownKind(b[5]))?;
    let payload_type = PayloadType::from_u8(b[6]).ok_or(CodecError::UnknownPayloadType(b[6]))?;
    let flags = Flags::from_bits(b[7]).ok_or(CodecError::ReservedFlags(b[7]))?;
    Ok(FixedPart {
        kind,
        payload_type,
        flags,
        sequence: u64::from_be_bytes(b[8..16].try_into().unwrap()),
        timestamp_send: u64::from_be_bytes(b[16..24].try_into().unwrap()),
        topic_len: u16::from_be_bytes(b[24..26].try_into().unwrap()) as usize,
    })
}

#[derive(Debug, Error)]
pub enum ReadFrameError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Reads one frame from a byte stream. Returns `Ok(None)` on a clean end of
/// stream at a frame boundary; an end of stream inside a frame is a
/// truncation error.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Frame>, ReadFrameError> {
    let mut prefix = [0u8; PREFIX_LEN];
    let got = read_full(reader, &mut prefix)?;
    if got == 0 {
        return Ok(None);
    }
    if got < PREFIX_LEN {
        return Err(CodecError::Truncated {
            needed: PREFIX_LEN,
            available: got,
        }
        .into());
    }
    let fixed = parse_fixed(&prefix)?;
    let mut rest = vec![0u8; fixed.topic_len + 20];
    read_exact_or_truncated(reader, &mut rest, PREFIX_LEN)?;
    let payload_len = u32::from_be_bytes(rest[fixed.topic_len + 16..].try_into().unwrap()) as usize;
    let mut payload = vec![0u8; payload_len];
    read_exact_or_truncated(reader, &mut payload, PREFIX_LEN + rest.len())?;
    let correlation = Correlation(rest[fixed.topic_len..fixed.topic_len + 16].try_into().unwrap());
    rest.truncate(fixed.topic_len);
    let topic = String::from_utf8(rest).map_err(|_| CodecError::InvalidTopicUtf8)?;
    Ok(Some(fixed.finish(topic, correlation, Bytes::from(payload))?))
}

fn read_full<R: Read>(reader: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn read_exact_or_truncated<R: Read>(reader: &mut R, buf: &mut [u8], offset: usize) -> Result<(), ReadFrameError> {
    let got = read_full(reader, buf)?;
    if got < buf.len() {
        return Err(CodecError::Truncated {
            needed: offset + buf.len(),
            available: offset + got,
        }
        .into());
    }
    Ok(())
}
