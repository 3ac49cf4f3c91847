use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::{Condvar, Mutex};

use crate::envelope::control::{AdvertiseOp, Advertisement, Role};
use crate::envelope::{encode_typed_payload, now_nanos, Correlation, Flags, Frame, FrameKind, PayloadType, Value};
use crate::reliability::{QosProfile, RetryAction, RetryCounters, RetryTable};
use crate::transport::topic::{is_reserved, is_valid_topic};

use super::node::{Node, NodeInner, NodeStatus};
use super::{NodeError, TopicSpec};

/// A reliable frame whose retries ran out without an acknowledgement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryFailed {
    pub topic: String,
    pub sequence: u64,
}

impl std::fmt::Display for DeliveryFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "delivery failed: {} seq {}", self.topic, self.sequence)
    }
}

impl std::error::Error for DeliveryFailed {}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PublisherStats {
    pub published: u64,
    pub in_flight: usize,
    pub retry: RetryCounters,
}

struct PubState {
    next_seq: u64,
    retry: Option<RetryTable>,
}

pub(crate) struct PublisherInner {
    pub(crate) id: Correlation,
    topic: String,
    payload_type: PayloadType,
    qos: QosProfile,
    state: Mutex<PubState>,
    room: Condvar,
    failures: Mutex<Vec<DeliveryFailed>>,
    published: AtomicU64,
}

impl PublisherInner {
    pub(crate) fn advertise_frame(&self) -> Frame {
        Advertisement {
            role: Role::Publisher,
            declared_type: self.payload_type,
            op: AdvertiseOp::Register,
        }
        .to_frame(&self.topic, self.id)
    }

    pub(crate) fn wake_blocked(&self) {
        self.room.notify_all();
    }

    pub(crate) fn resend_all(&self, now: Instant) -> Vec<Frame> {
        match &mut self.state.lock().retry {
            Some(t) => t.resend_all(now),
            None => Vec::new(),
        }
    }

    fn handle_ack(&self, sequence: u64) -> bool {
        let mut st = self.state.lock();
        let hit = st.retry.as_mut().is_some_and(|t| t.handle_ack(sequence));
        drop(st);
        if hit {
            self.room.notify_all();
        }
        hit
    }
}

/// Handle for publishing on one topic. Publishing is safe from any thread.
/// Dropping the handle withdraws the advertisement.
pub struct Publisher {
    inner: Arc<PublisherInner>,
    node: Weak<NodeInner>,
}

impl Publisher {
    pub fn topic(&self) -> &str {
        &self.inner.topic
    }

    pub fn payload_type(&self) -> PayloadType {
        self.inner.payload_type
    }

    pub fn qos(&self) -> &QosProfile {
        &self.inner.qos
    }

    pub fn id(&self) -> Correlation {
        self.inner.id
    }

    /// Encodes and sends `value`, returning its sequence number. Values of
    /// any other type than the advertised one are rejected before anything
    /// is sent.
    ///
    /// Reliable publishers block while the in-flight window is full.
    pub fn publish(&self, value: impl Into<Value>) -> Result<u64, NodeError> {
        let value = value.into();
        let actual = value.payload_type();
        if actual != self.inner.payload_type {
            return Err(NodeError::TypeMismatch {
                expected: self.inner.payload_type,
                actual,
            });
        }
        let (_, payload) = encode_typed_payload(&value)?;
        self.publish_payload(payload)
    }

    /// Sends a payload already encoded for the advertised type.
    pub fn publish_payload(&self, payload: Bytes) -> Result<u64, NodeError> {
        let node = self.node.upgrade().ok_or(NodeError::Shutdown)?;
        let reliable = self.inner.qos.is_reliable();
        match node.status() {
            NodeStatus::Connected => {}
            NodeStatus::Reconnecting if reliable => {}
            _ => return Err(node.unavailable().unwrap_or(NodeError::NotConnected)),
        }
        let inner = &self.inner;
        let mut st = inner.state.lock();
        let seq = st.next_seq;
        if let Some(table) = &st.retry {
            if !table.has_room_for(seq) {
                loop {
                    inner.room.wait_for(&mut st, Duration::from_millis(50));
                    if st.retry.as_ref().is_some_and(|t| t.has_room_for(seq)) {
                        break;
                    }
                    if let Some(e) = node.unavailable().filter(|e| !matches!(e, NodeError::NotConnected)) {
                        return Err(e);
                    }
                }
            }
        }
        st.next_seq += 1;
        let mut frame = Frame::new(FrameKind::Data, inner.topic.clone())
            .with_payload(inner.payload_type, payload)
            .with_correlation(inner.id)
            .with_sequence(seq);
        frame.timestamp_send = now_nanos();
        let sent = if let Some(table) = &mut st.retry {
            frame.flags = Flags::REQUIRES_ACK;
            table.track(frame.clone(), Instant::now());
            // an unsent reliable frame is retried like a lost one
            let _ = node.send(frame);
            Ok(())
        } else {
            node.send(frame)
        };
        drop(st);
        inner.published.fetch_add(1, Ordering::Relaxed);
        sent.map(|_| seq)
    }

    /// Sequence numbers whose delivery failed since the last call.
    pub fn take_failures(&self) -> Vec<DeliveryFailed> {
        std::mem::take(&mut *self.inner.failures.lock())
    }

    pub fn stats(&self) -> PublisherStats {
        let st = self.inner.state.lock();
        PublisherStats {
            published: self.inner.published.load(Ordering::Relaxed),
            in_flight: st.retry.as_ref().map_or(0, |t| t.len()),
            retry: st.retry.as_ref().map(|t| t.counters).unwrap_or_default(),
        }
    }

    /// Waits until no reliable frame awaits acknowledgement.
    pub fn wait_settled(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.inner.state.lock();
        loop {
            if st.retry.as_ref().is_none_or(|t| t.is_empty()) {
                return true;
            }
            if self.inner.room.wait_until(&mut st, deadline).timed_out() {
                return st.retry.as_ref().is_none_or(|t| t.is_empty());
            }
        }
    }
}

impl Drop for Publisher {
    fn drop(&mut self) {
        let Some(node) = self.node.upgrade() else { return };
        node.publishers.write().remove(&self.inner.id);
        if node.is_shut_down() {
            return;
        }
        let withdraw = Advertisement {
            role: Role::Publisher,
            declared_type: self.inner.payload_type,
            op: AdvertiseOp::Withdraw,
        }
        .to_frame(&self.inner.topic, self.inner.id);
        node.cancel_control(FrameKind::Advertise, self.inner.id);
        node.control_fire(withdraw);
    }
}

impl Node {
    /// Advertises a topic. Reliable publishers retransmit until every
    /// reliable subscriber has acknowledged each frame.
    pub fn advertise(&self, spec: &TopicSpec) -> Result<Publisher, NodeError> {
        if !is_valid_topic(&spec.name) {
            return Err(NodeError::InvalidTopic(spec.name.clone()));
        }
        if is_reserved(&spec.name) {
            return Err(NodeError::ReservedName(spec.name.clone()));
        }
        spec.qos.validate()?;
        let node = &self.inner;
        let inner = Arc::new(PublisherInner {
            id: node.next_correlation(),
            topic: spec.name.clone(),
            payload_type: spec.payload_type,
            qos: spec.qos.clone(),
            state: Mutex::new(PubState {
                next_seq: 1,
                retry: spec.qos.is_reliable().then(|| RetryTable::new(spec.qos.clone())),
            }),
            room: Condvar::new(),
            failures: Mutex::new(Vec::new()),
            published: AtomicU64::new(0),
        });
        node.publishers.write().insert(inner.id, inner.clone());
        if let Err(e) = node.control_request(inner.advertise_frame()) {
            node.publishers.write().remove(&inner.id);
            return Err(e);
        }
        Ok(Publisher {
            inner,
            node: Arc::downgrade(node),
        })
    }
}

impl NodeInner {
    pub(crate) fn on_ack(&self, frame: Frame) {
        let publisher = self.publishers.read().get(&frame.correlation).cloned();
        let hit = publisher.is_some_and(|p| p.handle_ack(frame.sequence));
        if !hit {
            self.counters.unknown_acks.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub(crate) fn poll_publishers(&self, now: Instant) -> Option<Instant> {
        let pubs: Vec<_> = self.publishers.read().values().cloned().collect();
        let mut next: Option<Instant> = None;
        for p in pubs {
            let mut st = p.state.lock();
            let Some(table) = st.retry.as_mut() else { continue };
            let actions = table.poll(now);
            let mut freed = false;
            for a in actions {
                match a {
                    RetryAction::Retransmit(f) => {
                        let _ = self.send(f);
                    }
                    RetryAction::Failed(sequence) => {
                        freed = true;
                        log::warn!("{}: delivery of seq {} failed", p.topic, sequence);
                        p.failures.lock().push(DeliveryFailed {
                            topic: p.topic.clone(),
                            sequence,
                        });
                    }
                }
            }
            if let Some(d) = table.next_deadline() {
                next = Some(next.map_or(d, |n| n.min(d)));
            }
            drop(st);
            if freed {
                p.room.notify_all();
            }
        }
        next
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failures_render_sequence() {
        let f = DeliveryFailed {
            topic: "a".into(),
            sequence: 9,
        };
        assert_eq!(f.to_string(), "delivery failed: a seq 9");
    }

    #[test]
    fn ack_wakes_blocked_publishers() {
        let inner = PublisherInner {
            id: Correlation::from_u128(1),
            topic: "t".into(),
            payload_type: PayloadType::Int64,
            qos: QosProfile::reliable(),
            state: Mutex::new(PubState {
                next_seq: 2,
                retry: Some(RetryTable::new(QosProfile::reliable())),
            }),
            room: Condvar::new(),
            failures: Mutex::new(Vec::new()),
            published: AtomicU64::new(0),
        };
        let f = Frame::new(FrameKind::Data, "t").with_sequence(1);
        inner.state.lock().retry.as_mut().unwrap().track(f, Instant::now());
        assert!(inner.handle_ack(1));
        assert!(!inner.handle_ack(1));
    }
}
