//! Central routing authority shared by the in-process and TCP transports.
//!
//! Every connection is attached with an outbound queue; inbound frames are
//! handed to [`BrokerCore::handle`], which mutates the routing tables under a
//! single lock and pushes replies and fan-out copies onto outbound queues
//! without blocking.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::{Duration, Instant};

use bytes::Bytes;
use crossbeam_channel::{Sender, TrySendError};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::envelope::control::{ack_for, AdvertiseOp, Advertisement, Role, SubscriptionRequest};
use crate::envelope::{now_nanos, Correlation, Frame, FrameKind, PayloadType};

use super::topic::{is_wildcard, topic_matches};

pub type ConnId = u64;

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub heartbeat_interval: Duration,
    /// Outbound frames queued per connection before DATA frames are dropped.
    pub outbound_capacity: usize,
    /// How long an unanswered request or unacknowledged reliable frame is
    /// remembered for reply routing.
    pub routing_ttl: Duration,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            heartbeat_interval: Duration::from_millis(500),
            outbound_capacity: 65_536,
            routing_ttl: Duration::from_secs(600),
        }
    }
}

/// JSON document answering an INFO_REQ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct GraphInfo {
    pub nodes: Vec<String>,
    pub topics: Vec<TopicInfo>,
    pub services: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicInfo {
    pub name: String,
    #[serde(rename = "type")]
    pub type_name: String,
    pub publishers: usize,
    pub subscribers: usize,
}

#[derive(Debug, Default)]
pub struct BrokerStats {
    pub frames_in: AtomicU64,
    pub data_forwarded: AtomicU64,
    pub dropped_full: AtomicU64,
    pub dropped_unroutable: AtomicU64,
    pub unknown_acks: AtomicU64,
}

struct ConnEntry {
    outbound: Sender<Frame>,
    closer: Option<Box<dyn Fn() + Send + Sync>>,
    node_name: Option<String>,
    subscriptions: HashSet<(String, Correlation)>,
    publishers: HashSet<Correlation>,
    services: HashSet<String>,
    actions: HashSet<String>,
}

struct Advertised {
    payload_type: PayloadType,
    publishers: HashMap<Correlation, ConnId>,
}

struct PendingAck {
    publisher_conn: ConnId,
    waiting: HashSet<ConnId>,
    deadline: Instant,
}

type SubscriberSet = HashMap<ConnId, HashMap<Correlation, SubscriptionRequest>>;

#[derive(Default)]
struct BrokerState {
    conns: HashMap<ConnId, ConnEntry>,
    nodes: HashMap<String, ConnId>,
    exact_subs: HashMap<String, SubscriberSet>,
    wildcard_subs: HashMap<String, SubscriberSet>,
    advertisements: HashMap<String, Advertised>,
    publisher_conns: HashMap<Correlation, ConnId>,
    service_registry: HashMap<String, ConnId>,
    action_registry: HashMap<String, ConnId>,
    reply_routes: HashMap<Correlation, (ConnId, Instant)>,
    pending_acks: HashMap<(Correlation, u64), PendingAck>,
}

pub struct BrokerCore {
    state: Mutex<BrokerState>,
    config: BrokerConfig,
    next_conn: AtomicU64,
    heartbeat_seq: AtomicU64,
    shutdown: AtomicBool,
    pub stats: BrokerStats,
}

impl BrokerCore {
    pub fn new(config: BrokerConfig) -> Arc<BrokerCore> {
        let core = Arc::new(BrokerCore {
            state: Mutex::new(BrokerState::default()),
            config,
            next_conn: AtomicU64::new(1),
            heartbeat_seq: AtomicU64::new(0),
            shutdown: AtomicBool::new(false),
            stats: BrokerStats::default(),
        });
        spawn_heartbeat(Arc::downgrade(&core));
        core
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn is_shut_down(&self) -> bool {
        self.shutdown.load(Ordering::Acquire)
    }

    /// Registers a connection. `closer` is invoked when the broker drops the
    /// connection on its own initiative (shutdown).
    pub fn attach(&self, outbound: Sender<Frame>, closer: Option<Box<dyn Fn() + Send + Sync>>) -> Option<ConnId> {
        let mut st = self.state.lock();
        if self.is_shut_down() {
            return None;
        }
        let id = self.next_conn.fetch_add(1, Ordering::Relaxed);
        st.conns.insert(
            id,
            ConnEntry {
                outbound,
                closer,
                node_name: None,
                subscriptions: HashSet::new(),
                publishers: HashSet::new(),
                services: HashSet::new(),
                actions: HashSet::new(),
            },
        );
        Some(id)
    }

    pub fn is_attached(&self, conn: ConnId) -> bool {
        self.state.lock().conns.contains_key(&conn)
    }

    /// Removes every trace of a connection from the routing tables.
    pub fn detach(&self, conn: ConnId) {
        let mut st = self.state.lock();
        st.remove_conn(conn);
    }

    pub fn shutdown(&self) {
        self.shutdown.store(true, Ordering::Release);
        let entries: Vec<ConnEntry> = {
            let mut st = self.state.lock();
            let entries = st.conns.drain().map(|(_, e)| e).collect();
            *st = BrokerState::default();
            entries
        };
        for e in entries {
            if let Some(close) = &e.closer {
                close();
            }
        }
    }

    pub fn graph_info(&self) -> GraphInfo {
        self.state.lock().graph_info()
    }

    /// Number of attached connections.
    pub fn connection_count(&self) -> usize {
        self.state.lock().conns.len()
    }

    pub fn handle(&self, source: ConnId, frame: Frame) {
        self.stats.frames_in.fetch_add(1, Ordering::Relaxed);
        let mut st = self.state.lock();
        if !st.conns.contains_key(&source) {
            return;
        }
        match frame.kind {
            FrameKind::Data => self.route_data(&mut st, source, frame),
            FrameKind::Ack => self.route_ack(&mut st, source, frame),
            FrameKind::SvcReq => {
                match st.service_registry.get(&frame.topic).copied() {
                    Some(server) => {
                        st.reply_routes.insert(frame.correlation, (source, Instant::now()));
                        self.send(&st, server, frame);
                    }
                    None => {
                        let msg = format!("no such service: {}", frame.topic);
                        let reply = Frame::error_reply(FrameKind::SvcResp, &frame.topic, frame.correlation, &msg);
                        self.send(&st, source, reply);
                    }
                }
            }
            FrameKind::SvcResp => match st.reply_routes.remove(&frame.correlation) {
                Some((client, _)) => self.send(&st, client, frame),
                None => self.unroutable(),
            },
            FrameKind::ActionGoal => match st.action_registry.get(&frame.topic).copied() {
                Some(server) => {
                    st.reply_routes.insert(frame.correlation, (source, Instant::now()));
                    self.send(&st, server, frame);
                }
                None => {
                    let msg = format!("no such action: {}", frame.topic);
                    let reply = Frame::error_reply(FrameKind::ActionResult, &frame.topic, frame.correlation, &msg);
                    self.send(&st, source, reply);
                }
            },
            FrameKind::ActionCancel => match st.action_registry.get(&frame.topic).copied() {
                Some(server) => self.send(&st, server, frame),
                None => self.unroutable(),
            },
            FrameKind::ActionFeedback => {
                if let Some(route) = st.reply_routes.get_mut(&frame.correlation) {
                    route.1 = Instant::now();
                    let client = route.0;
                    self.send(&st, client, frame);
                } else {
                    self.unroutable();
                }
            }
            FrameKind::ActionResult => match st.reply_routes.remove(&frame.correlation) {
                Some((client, _)) => self.send(&st, client, frame),
                None => self.unroutable(),
            },
            FrameKind::Advertise => {
                let reply = self.advertise(&mut st, source, &frame);
                self.send(&st, source, reply);
            }
            FrameKind::Sub => {
                let reply = match SubscriptionRequest::parse(&frame) {
                    Some(req) if !frame.topic.is_empty() => {
                        st.add_subscription(source, &frame.topic, frame.correlation, req);
                        ok_reply(&frame)
                    }
                    _ => Frame::error_reply(FrameKind::Sub, &frame.topic, frame.correlation, "malformed SUB"),
                };
                self.send(&st, source, reply);
            }
            FrameKind::Unsub => {
                st.remove_subscription(source, &frame.topic, frame.correlation);
                let reply = ok_reply(&frame);
                self.send(&st, source, reply);
            }
            FrameKind::InfoReq => {
                let json = serde_json::to_vec(&st.graph_info()).expect("graph info serializes");
                let mut reply = Frame::new(FrameKind::InfoResp, "")
                    .with_correlation(frame.correlation)
                    .with_payload(PayloadType::StringUtf8, Bytes::from(json));
                reply.timestamp_send = now_nanos();
                self.send(&st, source, reply);
            }
            FrameKind::Heartbeat | FrameKind::InfoResp => {}
        }
    }

    fn route_data(&self, st: &mut BrokerState, source: ConnId, frame: Frame) {
        // connection -> has a reliable subscription among its matches
        let mut targets: Vec<(ConnId, bool)> = Vec::new();
        let mut collect = |set: &SubscriberSet| {
            for (conn, subs) in set {
                let reliable = subs.values().any(|s| s.reliable);
                match targets.iter_mut().find(|(c, _)| c == conn) {
                    Some(t) => t.1 |= reliable,
                    None => targets.push((*conn, reliable)),
                }
            }
        };
        if let Some(set) = st.exact_subs.get(&frame.topic) {
            collect(set);
        }
        for (pattern, set) in &st.wildcard_subs {
            if topic_matches(pattern, &frame.topic) {
                collect(set);
            }
        }

        if frame.flags.requires_ack() && !frame.correlation.is_zero() {
            if let std::collections::hash_map::Entry::Vacant(slot) = st.publisher_conns.entry(frame.correlation) {
                slot.insert(source);
                if let Some(e) = st.conns.get_mut(&source) {
                    e.publishers.insert(frame.correlation);
                }
            }
            let waiting: HashSet<ConnId> = targets.iter().filter(|(_, r)| *r).map(|(c, _)| *c).collect();
            if targets.is_empty() {
                // Nobody to deliver to yet: withhold the ack so the
                // publisher keeps retrying until a subscriber appears or its
                // retry budget runs out.
            } else if waiting.is_empty() {
                self.send(st, source, ack_for(&frame));
            } else {
                let deadline = Instant::now() + self.config.routing_ttl;
                st.pending_acks
                    .entry((frame.correlation, frame.sequence))
                    .or_insert_with(|| PendingAck {
                        publisher_conn: source,
                        waiting: HashSet::new(),
                        deadline,
                    })
                    .waiting
                    .extend(waiting);
            }
        }

        if targets.is_empty() {
            return;
        }
        let last = targets.len() - 1;
        let mut frame = Some(frame);
        for (i, (conn, _)) in targets.iter().enumerate() {
            let f = if i == last {
                frame.take().unwrap()
            } else {
                frame.as_ref().unwrap().clone()
            };
            self.send(st, *conn, f);
            self.stats.data_forwarded.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn route_ack(&self, st: &mut BrokerState, source: ConnId, frame: Frame) {
        let key = (frame.correlation, frame.sequence);
        let Some(pending) = st.pending_acks.get_mut(&key) else {
            self.stats.unknown_acks.fetch_add(1, Ordering::Relaxed);
            return;
        };
        pending.waiting.remove(&source);
        if pending.waiting.is_empty() {
            let publisher = pending.publisher_conn;
            st.pending_acks.remove(&key);
            self.send(st, publisher, frame);
        }
    }

    fn advertise(&self, st: &mut BrokerState, source: ConnId, frame: &Frame) -> Frame {
        let err = |msg: &str| Frame::error_reply(FrameKind::Advertise, &frame.topic, frame.correlation, msg);
        let Some(ad) = Advertisement::parse(frame) else {
            return err("malformed ADVERTISE");
        };
        if frame.topic.is_empty() {
            return err("empty name");
        }
        let name = frame.topic.clone();
        let id = frame.correlation;
        match (ad.role, ad.op) {
            (Role::Node, AdvertiseOp::Register) => {
                if matches!(st.nodes.get(&name), Some(owner) if *owner != source) {
                    return err(&format!("duplicate node name: {name}"));
                }
                if let Some(old) = st.entry(source).node_name.replace(name.clone()) {
                    st.nodes.remove(&old);
                }
                st.nodes.insert(name, source);
            }
            (Role::Node, AdvertiseOp::Withdraw) => {
                if st.entry(source).node_name.as_deref() == Some(name.as_str()) {
                    st.entry(source).node_name = None;
                    st.nodes.remove(&name);
                }
            }
            (Role::Publisher, AdvertiseOp::Register) => {
                if id.is_zero() {
                    return err("publisher id must be nonzero");
                }
                if let Some(existing) = st.advertisements.get(&name) {
                    let foreign = existing.publishers.keys().any(|p| *p != id);
                    if existing.payload_type != ad.declared_type && foreign {
                        return err(&format!(
                            "topic {name} already advertised as {}, not {}",
                            existing.payload_type, ad.declared_type
                        ));
                    }
                }
                st.entry(source).publishers.insert(id);
                st.publisher_conns.insert(id, source);
                let adv = st.advertisements.entry(name).or_insert_with(|| Advertised {
                    payload_type: ad.declared_type,
                    publishers: HashMap::new(),
                });
                adv.payload_type = ad.declared_type;
                adv.publishers.insert(id, source);
            }
            (Role::Publisher, AdvertiseOp::Withdraw) => {
                st.entry(source).publishers.remove(&id);
                st.publisher_conns.remove(&id);
                st.remove_advertisement(&name, id);
            }
            (Role::Service, AdvertiseOp::Register) => {
                if matches!(st.service_registry.get(&name), Some(owner) if *owner != source) {
                    return err(&format!("service already registered: {name}"));
                }
                st.entry(source).services.insert(name.clone());
                st.service_registry.insert(name, source);
            }
            (Role::Service, AdvertiseOp::Withdraw) => {
                if st.service_registry.get(&name) == Some(&source) {
                    st.service_registry.remove(&name);
                    st.entry(source).services.remove(&name);
                }
            }
            (Role::Action, AdvertiseOp::Register) => {
                if matches!(st.action_registry.get(&name), Some(owner) if *owner != source) {
                    return err(&format!("action already registered: {name}"));
                }
                st.entry(source).actions.insert(name.clone());
                st.action_registry.insert(name, source);
            }
            (Role::Action, AdvertiseOp::Withdraw) => {
                if st.action_registry.get(&name) == Some(&source) {
                    st.action_registry.remove(&name);
                    st.entry(source).actions.remove(&name);
                }
            }
        }
        ok_reply(frame)
    }

    fn send(&self, st: &BrokerState, conn: ConnId, frame: Frame) {
        let Some(entry) = st.conns.get(&conn) else {
            return;
        };
        match entry.outbound.try_send(frame) {
            Ok(()) => {}
            Err(TrySendError::Full(_)) => {
                self.stats.dropped_full.fetch_add(1, Ordering::Relaxed);
            }
            Err(TrySendError::Disconnected(_)) => {}
        }
    }

    fn unroutable(&self) {
        self.stats.dropped_unroutable.fetch_add(1, Ordering::Relaxed);
    }

    fn tick(&self) {
        let mut hb = Frame::new(FrameKind::Heartbeat, "");
        hb.sequence = self.heartbeat_seq.fetch_add(1, Ordering::Relaxed) + 1;
        hb.timestamp_send = now_nanos();
        let mut st = self.state.lock();
        let dead: Vec<ConnId> = st
            .conns
            .iter()
            .filter(|(_, e)| e.outbound.try_send(hb.clone()).is_err_and(|e| e.is_disconnected()))
            .map(|(id, _)| *id)
            .collect();
        for id in dead {
            st.remove_conn(id);
        }
        let now = Instant::now();
        let ttl = self.config.routing_ttl;
        st.pending_acks.retain(|_, p| p.deadline > now);
        st.reply_routes.retain(|_, (_, t)| now.duration_since(*t) < ttl);
    }
}

fn ok_reply(request: &Frame) -> Frame {
    Frame::new(request.kind, request.topic.clone()).with_correlation(request.correlation)
}

fn spawn_heartbeat(core: Weak<BrokerCore>) {
    let interval = match core.upgrade() {
        Some(c) => c.config.heartbeat_interval,
        None => return,
    };
    thread::Builder::new()
        .name("broker-heartbeat".into())
        .spawn(move || loop {
            thread::sleep(interval);
            match core.upgrade() {
                Some(c) if !c.is_shut_down() => c.tick(),
                _ => return,
            }
        })
        .expect("spawn heartbeat thread");
}

impl BrokerState {
    fn entry(&mut self, conn: ConnId) -> &mut ConnEntry {
        self.conns.get_mut(&conn).expect("connection attached")
    }

    fn subs_map(&mut self, pattern: &str) -> &mut HashMap<String, SubscriberSet> {
        if is_wildcard(pattern) {
            &mut self.wildcard_subs
        } else {
            &mut self.exact_subs
        }
    }

    fn add_subscription(&mut self, conn: ConnId, pattern: &str, id: Correlation, req: SubscriptionRequest) {
        if let Some(e) = self.conns.get_mut(&conn) {
            e.subscriptions.insert((pattern.to_string(), id));
        }
        self.subs_map(pattern)
            .entry(pattern.to_string())
            .or_default()
            .entry(conn)
            .or_default()
            .insert(id, req);
    }

    fn remove_subscription(&mut self, conn: ConnId, pattern: &str, id: Correlation) {
        if let Some(e) = self.conns.get_mut(&conn) {
            e.subscriptions.remove(&(pattern.to_string(), id));
        }
        let map = self.subs_map(pattern);
        if let Some(set) = map.get_mut(pattern) {
            if let Some(subs) = set.get_mut(&conn) {
                subs.remove(&id);
                if subs.is_empty() {
                    set.remove(&conn);
                }
            }
            if set.is_empty() {
                map.remove(pattern);
            }
        }
    }

    fn remove_advertisement(&mut self, topic: &str, id: Correlation) {
        if let Some(adv) = self.advertisements.get_mut(topic) {
            adv.publishers.remove(&id);
            if adv.publishers.is_empty() {
                self.advertisements.remove(topic);
            }
        }
    }

    fn remove_conn(&mut self, conn: ConnId) {
        let Some(entry) = self.conns.remove(&conn) else {
            return;
        };
        if let Some(name) = &entry.node_name {
            if self.nodes.get(name) == Some(&conn) {
                self.nodes.remove(name);
            }
        }
        for (pattern, id) in &entry.subscriptions {
            self.remove_subscription(conn, pattern, *id);
        }
        for id in &entry.publishers {
            self.publisher_conns.remove(id);
        }
        let topics: Vec<String> = self.advertisements.keys().cloned().collect();
        for t in topics {
            for id in &entry.publishers {
                self.remove_advertisement(&t, *id);
            }
        }
        for s in &entry.services {
            if self.service_registry.get(s) == Some(&conn) {
                self.service_registry.remove(s);
            }
        }
        for a in &entry.actions {
            if self.action_registry.get(a) == Some(&conn) {
                self.action_registry.remove(a);
            }
        }
        self.reply_routes.retain(|_, (c, _)| *c != conn);
        // Frames still awaiting this subscriber are forgotten without an ack;
        // the publisher's retries will re-deliver them.
        self.pending_acks
            .retain(|_, p| p.publisher_conn != conn && !p.waiting.contains(&conn));
    }

    fn graph_info(&self) -> GraphInfo {
        let mut nodes: Vec<String> = self.nodes.keys().cloned().collect();
        nodes.sort();
        let mut topics: HashMap<String, TopicInfo> = HashMap::new();
        for (name, adv) in &self.advertisements {
            topics.insert(
                name.clone(),
                TopicInfo {
                    name: name.clone(),
                    type_name: adv.payload_type.name().to_string(),
                    publishers: adv.publishers.len(),
                    subscribers: 0,
                },
            );
        }
        for (pattern, set) in self.exact_subs.iter().chain(self.wildcard_subs.iter()) {
            let count: usize = set.values().map(|s| s.len()).sum();
            let declared = set
                .values()
                .flat_map(|s| s.values())
                .find_map(|r| r.declared_type)
                .map_or("ANY", |t| t.name());
            let info = topics.entry(pattern.clone()).or_insert_with(|| TopicInfo {
                name: pattern.clone(),
                type_name: declared.to_string(),
                publishers: 0,
                subscribers: 0,
            });
            info.subscribers += count;
        }
        let mut topics: Vec<TopicInfo> = topics.into_values().collect();
        topics.sort_by(|a, b| a.name.cmp(&b.name));
        let mut services: Vec<String> = self.service_registry.keys().cloned().collect();
        services.sort();
        GraphInfo {
            nodes,
            topics,
            services,
        }
    }
}
