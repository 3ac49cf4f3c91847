//! Payload conventions for control frames exchanged between nodes and the
//! broker.
//!
//! | kind        | topic            | correlation         | payload                                   |
//! |-------------|------------------|---------------------|-------------------------------------------|
//! | ADVERTISE   | name             | endpoint id         | `role u8 · declared type u8 · op u8`      |
//! | SUB         | pattern          | subscription id     | `declared type u8 (0xFF = any) · reliable u8` |
//! | UNSUB       | pattern          | subscription id     | empty                                     |
//! | ACK         | data topic       | publisher id        | empty, `sequence` = acknowledged sequence |
//! | HEARTBEAT   | empty            | zero                | empty, `sequence` = heartbeat counter     |
//! | INFO_REQ    | empty            | request id          | empty                                     |
//! | INFO_RESP   | empty            | request id          | UTF-8 JSON graph description              |
//!
//! The broker answers ADVERTISE, SUB and UNSUB with a frame of the same kind
//! and correlation; a failure sets the `error_response` flag and carries a
//! UTF-8 message. DATA frames carry their publisher id in the correlation
//! field so subscribers can suppress duplicates per publisher. ACTION_RESULT
//! frames carry the terminal goal state code in `sequence`.

use bytes::Bytes;

use super::frame::{Correlation, Frame, FrameKind};
use super::payload::PayloadType;

/// Who is registering a name with an ADVERTISE frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Role {
    Publisher = 0,
    Service = 1,
    Action = 2,
    Node = 3,
}

impl Role {
    pub fn from_u8(tag: u8) -> Option<Role> {
        Some(match tag {
            0 => Role::Publisher,
            1 => Role::Service,
            2 => Role::Action,
            3 => Role::Node,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AdvertiseOp {
    Register = 0,
    Withdraw = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Advertisement {
    pub role: Role,
    pub declared_type: PayloadType,
    pub op: AdvertiseOp,
}

impl Advertisement {
    pub fn to_frame(self, name: &str, id: Correlation) -> Frame {
        Frame::new(FrameKind::Advertise, name)
            .with_correlation(id)
            .with_payload(
                PayloadType::Bytes,
                Bytes::copy_from_slice(&[self.role as u8, self.declared_type as u8, self.op as u8]),
            )
    }

    pub fn parse(frame: &Frame) -> Option<Advertisement> {
        let p = frame.payload.as_ref();
        if p.len() != 3 {
            return None;
        }
        Some(Advertisement {
            role: Role::from_u8(p[0])?,
            declared_type: PayloadType::from_u8(p[1])?,
            op: match p[2] {
                0 => AdvertiseOp::Register,
                1 => AdvertiseOp::Withdraw,
                _ => return None,
            },
        })
    }
}

pub const ANY_TYPE: u8 = 0xFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubscriptionRequest {
    pub declared_type: Option<PayloadType>,
    pub reliable: bool,
}

impl SubscriptionRequest {
    pub fn to_frame(self, pattern: &str, id: Correlation) -> Frame {
        let ty = self.declared_type.map_or(ANY_TYPE, |t| t as u8);
        Frame::new(FrameKind::Sub, pattern)
            .with_correlation(id)
            .with_payload(PayloadType::Bytes, Bytes::copy_from_slice(&[ty, self.reliable as u8]))
    }

    /// An empty payload is read as an untyped best-effort subscription, so
    /// minimal clients can subscribe with a bare SUB frame.
    pub fn parse(frame: &Frame) -> Option<SubscriptionRequest> {
        let p = frame.payload.as_ref();
        match p {
            [] => Some(SubscriptionRequest {
                declared_type: None,
                reliable: false,
            }),
            [ty, reliable] => Some(SubscriptionRequest {
                declared_type: if *ty == ANY_TYPE {
                    None
                } else {
                    Some(PayloadType::from_u8(*ty)?)
                },
                reliable: *reliable == 1,
            }),
            _ => None,
        }
    }
}

pub fn ack_for(data: &Frame) -> Frame {
    Frame::new(FrameKind::Ack, data.topic.clone())
        .with_correlation(data.correlation)
        .with_sequence(data.sequence)
}
