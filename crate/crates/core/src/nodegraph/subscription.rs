use std::collections::{HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::Instant;

use parking_lot::Mutex;

use crate::envelope::control::{ack_for, SubscriptionRequest};
use crate::envelope::{decode_typed_payload, now_nanos, Correlation, Frame, FrameKind, PayloadType, Value};
use crate::executor::{EntityId, Notifier, Schedulable};
use crate::reliability::{InboundStream, QosProfile};
use crate::transport::topic::{is_reserved, is_valid_pattern, topic_matches};

use super::node::{Node, NodeInner};
use super::{NodeError, TopicSpec};

/// A decoded message handed to a subscription callback.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub topic: String,
    pub value: Value,
    pub sequence: u64,
    /// Publisher's send time, nanoseconds since the Unix epoch.
    pub timestamp_send: u64,
    /// When the frame reached this node, nanoseconds since the Unix epoch.
    pub received_at: u64,
    pub publisher: Correlation,
    /// Size of the frame on the wire.
    pub encoded_len: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SubscriptionStats {
    pub received: u64,
    pub delivered: u64,
    pub dropped_overflow: u64,
    pub type_mismatches: u64,
    pub decode_errors: u64,
    pub duplicates: u64,
    pub late: u64,
    pub gaps: u64,
}

#[derive(Default)]
struct SubCounters {
    received: AtomicU64,
    delivered: AtomicU64,
    dropped_overflow: AtomicU64,
    type_mismatches: AtomicU64,
    decode_errors: AtomicU64,
}

type StreamKey = (Correlation, String);

struct Delivery {
    frame: Frame,
    received_at: u64,
    acked: bool,
}

enum Handler {
    Typed(Box<dyn FnMut(Message) + Send>),
    Raw(Box<dyn FnMut(Frame) + Send>),
}

pub(crate) struct SubInner {
    pub(crate) id: Correlation,
    entity: EntityId,
    pattern: String,
    declared: Option<PayloadType>,
    qos: QosProfile,
    queue: Mutex<VecDeque<Delivery>>,
    streams: Mutex<HashMap<StreamKey, InboundStream>>,
    handler: Mutex<Handler>,
    counters: SubCounters,
    closed: AtomicBool,
    notifier: Arc<Notifier>,
    node: Weak<NodeInner>,
}

impl SubInner {
    pub(crate) fn sub_frame(&self) -> Frame {
        SubscriptionRequest {
            declared_type: self.declared,
            reliable: self.qos.is_reliable(),
        }
        .to_frame(&self.pattern, self.id)
    }

    fn new_stream(&self) -> InboundStream {
        if self.qos.is_reliable() {
            InboundStream::reliable(self.qos.history_depth, self.qos.retry_budget())
        } else {
            InboundStream::best_effort()
        }
    }

    /// Queues released frames, evicting the oldest beyond the history depth.
    fn enqueue(&self, node: &NodeInner, frames: Vec<Frame>, received_at: u64) {
        if frames.is_empty() {
            return;
        }
        let mut evicted = Vec::new();
        {
            let mut q = self.queue.lock();
            for frame in frames {
                let acked = self.qos.is_reliable() && frame.flags.requires_ack();
                q.push_back(Delivery {
                    frame,
                    received_at,
                    acked,
                });
                while q.len() > self.qos.history_depth {
                    evicted.push(q.pop_front().expect("queue over depth is nonempty"));
                }
            }
        }
        for d in evicted {
            self.counters.dropped_overflow.fetch_add(1, Ordering::Relaxed);
            self.finish(node, &d);
        }
        self.notifier.notify();
    }

    /// Marks a delivery as handled and releases its share of the ack.
    fn finish(&self, node: &NodeInner, d: &Delivery) {
        if let Some(s) = self
            .streams
            .lock()
            .get_mut(&(d.frame.correlation, d.frame.topic.clone()))
        {
            s.mark_processed(d.frame.sequence);
        }
        if d.acked {
            node.settle_ack(d.frame.correlation, d.frame.sequence);
        }
    }

    fn close(&self, node: &NodeInner) {
        if self.closed.swap(true, Ordering::AcqRel) {
            return;
        }
        let queued: Vec<Delivery> = self.queue.lock().drain(..).collect();
        for d in &queued {
            self.finish(node, d);
        }
        let held: Vec<Frame> = self
            .streams
            .lock()
            .values_mut()
            .flat_map(|s| s.take_held())
            .collect();
        for f in held {
            if self.qos.is_reliable() && f.flags.requires_ack() {
                node.settle_ack(f.correlation, f.sequence);
            }
        }
    }

    fn stats(&self) -> SubscriptionStats {
        let c = &self.counters;
        let mut s = SubscriptionStats {
            received: c.received.load(Ordering::Relaxed),
            delivered: c.delivered.load(Ordering::Relaxed),
            dropped_overflow: c.dropped_overflow.load(Ordering::Relaxed),
            type_mismatches: c.type_mismatches.load(Ordering::Relaxed),
            decode_errors: c.decode_errors.load(Ordering::Relaxed),
            ..SubscriptionStats::default()
        };
        for st in self.streams.lock().values() {
            s.duplicates += st.counters.duplicates;
            s.late += st.counters.late;
            s.gaps += st.counters.gaps;
        }
        s
    }
}

impl Schedulable for SubInner {
    fn id(&self) -> EntityId {
        self.entity
    }

    fn label(&self) -> String {
        format!("sub:{}", self.pattern)
    }

    fn has_work(&self) -> bool {
        !self.closed.load(Ordering::Acquire) && !self.queue.lock().is_empty()
    }

    fn run_one(&self) -> Result<bool, String> {
        if self.closed.load(Ordering::Acquire) {
            return Ok(false);
        }
        let Some(d) = self.queue.lock().pop_front() else {
            return Ok(false);
        };
        let outcome = {
            let mut handler = self.handler.lock();
            match &mut *handler {
                Handler::Raw(cb) => {
                    let frame = d.frame.clone();
                    catch_unwind(AssertUnwindSafe(|| cb(frame))).map(|_| true)
                }
                Handler::Typed(cb) => match decode_typed_payload(d.frame.payload_type, &d.frame.payload) {
                    Ok(value) => {
                        let msg = Message {
                            topic: d.frame.topic.clone(),
                            value,
                            sequence: d.frame.sequence,
                            timestamp_send: d.frame.timestamp_send,
                            received_at: d.received_at,
                            publisher: d.frame.correlation,
                            encoded_len: d.frame.encoded_len(),
                        };
                        catch_unwind(AssertUnwindSafe(|| cb(msg))).map(|_| true)
                    }
                    Err(e) => {
                        self.counters.decode_errors.fetch_add(1, Ordering::Relaxed);
                        log::warn!("{}: undecodable payload: {e}", d.frame.topic);
                        Ok(false)
                    }
                },
            }
        };
        if let Ok(true) = outcome {
            self.counters.delivered.fetch_add(1, Ordering::Relaxed);
        }
        if let Some(node) = self.node.upgrade() {
            self.finish(&node, &d);
        }
        match outcome {
            Ok(_) => Ok(true),
            Err(panic) => Err(panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "subscription callback panicked".into())),
        }
    }
}

/// Handle for a subscription. Dropping it unsubscribes.
pub struct Subscription {
    inner: Arc<SubInner>,
    node: Weak<NodeInner>,
}

impl Subscription {
    pub fn pattern(&self) -> &str {
        &self.inner.pattern
    }

    pub fn stats(&self) -> SubscriptionStats {
        self.inner.stats()
    }

    /// Messages waiting for the executor.
    pub fn queued(&self) -> usize {
        self.inner.queue.lock().len()
    }

    pub fn unsubscribe(self) {}
}

impl Drop for Subscription {
    fn drop(&mut self) {
        let Some(node) = self.node.upgrade() else {
            self.inner.closed.store(true, Ordering::Release);
            return;
        };
        node.subscriptions.write().retain(|s| !Arc::ptr_eq(s, &self.inner));
        node.registry.remove(self.inner.entity);
        self.inner.close(&node);
        if node.is_shut_down() {
            return;
        }
        node.cancel_control(FrameKind::Sub, self.inner.id);
        let unsub = Frame::new(FrameKind::Unsub, self.inner.pattern.clone()).with_correlation(self.inner.id);
        node.control_fire(unsub);
    }
}

impl Node {
    /// Subscribes to a topic or wildcard pattern with a declared payload
    /// type. Frames of any other type are counted and discarded.
    pub fn subscribe(
        &self,
        spec: &TopicSpec,
        callback: impl FnMut(Message) + Send + 'static,
    ) -> Result<Subscription, NodeError> {
        self.add_subscription(
            &spec.name,
            Some(spec.payload_type),
            spec.qos.clone(),
            Handler::Typed(Box::new(callback)),
        )
    }

    /// Subscribes without a declared type; every payload is decoded
    /// according to its own type tag.
    pub fn subscribe_any(
        &self,
        pattern: &str,
        qos: QosProfile,
        callback: impl FnMut(Message) + Send + 'static,
    ) -> Result<Subscription, NodeError> {
        self.add_subscription(pattern, None, qos, Handler::Typed(Box::new(callback)))
    }

    /// Subscribes and receives undecoded frames.
    pub fn subscribe_raw(
        &self,
        pattern: &str,
        qos: QosProfile,
        callback: impl FnMut(Frame) + Send + 'static,
    ) -> Result<Subscription, NodeError> {
        self.add_subscription(pattern, None, qos, Handler::Raw(Box::new(callback)))
    }

    fn add_subscription(
        &self,
        pattern: &str,
        declared: Option<PayloadType>,
        qos: QosProfile,
        handler: Handler,
    ) -> Result<Subscription, NodeError> {
        if !is_valid_pattern(pattern) {
            return Err(NodeError::InvalidTopic(pattern.to_string()));
        }
        if is_reserved(pattern) {
            return Err(NodeError::ReservedName(pattern.to_string()));
        }
        qos.validate()?;
        let node = &self.inner;
        let inner = Arc::new(SubInner {
            id: node.next_correlation(),
            entity: EntityId::next(),
            pattern: pattern.to_string(),
            declared,
            qos,
            queue: Mutex::new(VecDeque::new()),
            streams: Mutex::new(HashMap::new()),
            handler: Mutex::new(handler),
            counters: SubCounters::default(),
            closed: AtomicBool::new(false),
            notifier: node.registry.notifier(),
            node: Arc::downgrade(node),
        });
        node.subscriptions.write().push(inner.clone());
        node.registry.add(inner.clone());
        let sub = Subscription {
            inner: inner.clone(),
            node: Arc::downgrade(node),
        };
        node.control_request(inner.sub_frame())?;
        Ok(sub)
    }
}

impl NodeInner {
    pub(crate) fn on_data(&self, frame: Frame) {
        let received_at = now_nanos();
        let now = Instant::now();
        let subs: Vec<Arc<SubInner>> = self
            .subscriptions
            .read()
            .iter()
            .filter(|s| !s.closed.load(Ordering::Acquire) && topic_matches(&s.pattern, &frame.topic))
            .cloned()
            .collect();
        let wants_ack = frame.flags.requires_ack();
        // Held across admission so a concurrent release of this frame
        // cannot settle it before its holders are counted.
        let mut counts = wants_ack.then(|| self.ack_counts.lock());
        let mut holders = 0usize;
        let mut ack_pending_elsewhere = false;
        let mut releases = Vec::with_capacity(subs.len());
        for s in subs {
            s.counters.received.fetch_add(1, Ordering::Relaxed);
            if s.declared.is_some_and(|t| t != frame.payload_type) {
                s.counters.type_mismatches.fetch_add(1, Ordering::Relaxed);
                continue;
            }
            let admission = {
                let mut streams = s.streams.lock();
                let stream = streams
                    .entry((frame.correlation, frame.topic.clone()))
                    .or_insert_with(|| s.new_stream());
                stream.admit(frame.clone(), now)
            };
            if admission.duplicate {
                if s.qos.is_reliable() && !admission.reack {
                    ack_pending_elsewhere = true;
                }
                continue;
            }
            if admission.late {
                continue;
            }
            if wants_ack && s.qos.is_reliable() {
                holders += 1;
            }
            releases.push((s, admission.deliver));
        }
        if let Some(counts) = counts.as_mut() {
            if holders > 0 {
                counts
                    .entry((frame.correlation, frame.sequence))
                    .or_insert_with(|| (0, frame.topic.clone()))
                    .0 += holders;
            }
        }
        drop(counts);
        if wants_ack && holders == 0 && !ack_pending_elsewhere {
            let _ = self.send(ack_for(&frame));
        }
        for (s, frames) in releases {
            s.enqueue(self, frames, received_at);
        }
    }

    pub(crate) fn settle_ack(&self, publisher: Correlation, sequence: u64) {
        let mut counts = self.ack_counts.lock();
        let Some(entry) = counts.get_mut(&(publisher, sequence)) else {
            return;
        };
        entry.0 = entry.0.saturating_sub(1);
        if entry.0 == 0 {
            let (_, topic) = counts.remove(&(publisher, sequence)).expect("entry present");
            drop(counts);
            let ack = Frame::new(FrameKind::Ack, topic)
                .with_correlation(publisher)
                .with_sequence(sequence);
            let _ = self.send(ack);
        }
    }

    /// Releases frames held by reliable streams past their start timeout.
    pub(crate) fn poll_streams(&self, now: Instant) -> Option<Instant> {
        let subs: Vec<Arc<SubInner>> = self
            .subscriptions
            .read()
            .iter()
            .filter(|s| s.qos.is_reliable())
            .cloned()
            .collect();
        let mut next: Option<Instant> = None;
        let received_at = now_nanos();
        for s in subs {
            let mut released = Vec::new();
            {
                let mut streams = s.streams.lock();
                for st in streams.values_mut() {
                    released.extend(st.poll(now));
                    if let Some(d) = st.start_deadline() {
                        next = Some(next.map_or(d, |n| n.min(d)));
                    }
                }
            }
            s.enqueue(self, released, received_at);
        }
        next
    }
}
