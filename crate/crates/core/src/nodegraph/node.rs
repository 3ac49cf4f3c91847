use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Sender};
use parking_lot::{Condvar, Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actions::{ActionServerEntity, GoalClient};
use crate::envelope::control::{AdvertiseOp, Advertisement, Role};
use crate::envelope::{Correlation, Frame, FrameKind, PayloadType};
use crate::executor::{EntityRegistry, JobQueue, Wakeup};
use crate::reliability::backoff_delay;
use crate::services::{PendingCall, ServiceEntity};
use crate::transport::{Connector, EndpointAddress, GraphInfo, SharedConnection};

use super::params::ParamStore;
use super::publisher::PublisherInner;
use super::rate::TimerInner;
use super::subscription::SubInner;
use super::{is_valid_node_name, NodeError};

/// How often unanswered control frames are sent again.
const CONTROL_RESEND: Duration = Duration::from_millis(200);
/// Lifetime of fire-and-forget control frames sent while re-registering.
const REREGISTER_DEADLINE: Duration = Duration::from_secs(30);
const RECV_POLL: Duration = Duration::from_millis(100);
const HOUSEKEEPING_MAX_SLEEP: Duration = Duration::from_millis(20);

#[derive(Debug, Clone)]
pub struct NodeOptions {
    /// Interval at which the broker is expected to send heartbeats.
    pub heartbeat_interval: Duration,
    /// Heartbeats that may go missing before the connection is presumed
    /// dead.
    pub missed_heartbeats: u32,
    pub reconnect_backoff_base: Duration,
    pub reconnect_backoff_max: Duration,
    /// Reconnect attempts per outage; `None` retries forever.
    pub reconnect_budget: Option<u32>,
    /// How long registration requests wait for the broker's reply.
    pub control_timeout: Duration,
    /// Seed for correlation ids; `None` draws from OS entropy.
    pub seed: Option<u64>,
}

impl Default for NodeOptions {
    fn default() -> Self {
        NodeOptions {
            heartbeat_interval: Duration::from_millis(500),
            missed_heartbeats: 3,
            reconnect_backoff_base: Duration::from_millis(50),
            reconnect_backoff_max: Duration::from_secs(2),
            reconnect_budget: None,
            control_timeout: Duration::from_secs(2),
            seed: None,
        }
    }
}

impl NodeOptions {
    pub fn with_seed(mut self, seed: u64) -> NodeOptions {
        self.seed = Some(seed);
        self
    }

    pub fn with_reconnect_budget(mut self, attempts: u32) -> NodeOptions {
        self.reconnect_budget = Some(attempts);
        self
    }

    fn liveness_timeout(&self) -> Duration {
        self.heartbeat_interval * self.missed_heartbeats.max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeStatus {
    Connected,
    Reconnecting,
    /// Reconnect budget exhausted; the node no longer talks to the broker.
    Failed,
    Shutdown,
}

#[derive(Debug, Default)]
pub struct NodeCounters {
    pub frames_received: AtomicU64,
    pub reconnects: AtomicU64,
    pub reconnect_attempts: AtomicU64,
    pub liveness_failures: AtomicU64,
    pub control_retransmissions: AtomicU64,
    /// Service responses that arrived after their call had settled.
    pub stale_responses: AtomicU64,
    pub unknown_acks: AtomicU64,
}

impl NodeCounters {
    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::Relaxed)
    }
}

struct PendingControl {
    frame: Frame,
    last_sent: Instant,
    deadline: Instant,
    waiter: Option<Sender<Frame>>,
}

pub(crate) struct NodeInner {
    pub(crate) name: String,
    node_id: Correlation,
    pub(crate) options: NodeOptions,
    connector: Box<dyn Connector>,
    conn: RwLock<Option<SharedConnection>>,
    status: Mutex<NodeStatus>,
    status_cond: Condvar,
    shutdown: AtomicBool,
    last_inbound: Mutex<Instant>,
    rng: Mutex<ChaCha8Rng>,
    pub(crate) registry: Arc<EntityRegistry>,
    /// Client-side callbacks: action feedback and results.
    pub(crate) client_jobs: Arc<JobQueue>,
    pub(crate) counters: NodeCounters,
    control: Mutex<HashMap<(FrameKind, Correlation), PendingControl>>,
    pub(crate) publishers: RwLock<HashMap<Correlation, Arc<PublisherInner>>>,
    pub(crate) subscriptions: RwLock<Vec<Arc<SubInner>>>,
    /// Reliable frames still being processed, with the number of local
    /// subscriptions that have yet to finish with each.
    pub(crate) ack_counts: Mutex<HashMap<(Correlation, u64), (usize, String)>>,
    pub(crate) timers: Mutex<Vec<Arc<TimerInner>>>,
    pub(crate) services: RwLock<HashMap<String, Arc<ServiceEntity>>>,
    pub(crate) calls: Mutex<HashMap<Correlation, PendingCall>>,
    pub(crate) action_servers: RwLock<HashMap<String, Arc<ActionServerEntity>>>,
    pub(crate) goals: Mutex<HashMap<Correlation, Arc<GoalClient>>>,
    pub(crate) params: Mutex<ParamStore>,
    housekeeping: Arc<Wakeup>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

/// A participant in the computation graph. Cloning yields another handle
/// to the same node; the node shuts down when the last handle is dropped
/// or [`Node::shutdown`] is called.
#[derive(Clone)]
pub struct Node {
    pub(crate) inner: Arc<NodeInner>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("name", &self.inner.name)
            .field("status", &self.status())
            .finish()
    }
}

impl Node {
    /// Connects to the broker at `address` with default options.
    pub fn connect(name: &str, address: &EndpointAddress) -> Result<Node, NodeError> {
        Node::with_connector(name, address.clone(), NodeOptions::default())
    }

    pub fn with_connector(
        name: &str,
        connector: impl Connector + 'static,
        options: NodeOptions,
    ) -> Result<Node, NodeError> {
        if !is_valid_node_name(name) {
            return Err(NodeError::InvalidName(name.to_string()));
        }
        let conn = connector.connect()?;
        let mut rng = match options.seed {
            Some(seed) => ChaCha8Rng::seed_from_u64(seed ^ name_hash(name)),
            None => ChaCha8Rng::from_os_rng(),
        };
        let node_id = Correlation(rng.random());
        let registry = EntityRegistry::new();
        let client_jobs = JobQueue::new(format!("{name}/client"), crate::executor::DEFAULT_WEIGHT, registry.notifier());
        registry.add(client_jobs.clone());
        let inner = Arc::new(NodeInner {
            name: name.to_string(),
            node_id,
            options,
            connector: Box::new(connector),
            conn: RwLock::new(Some(conn)),
            status: Mutex::new(NodeStatus::Connected),
            status_cond: Condvar::new(),
            shutdown: AtomicBool::new(false),
            last_inbound: Mutex::new(Instant::now()),
            rng: Mutex::new(rng),
            registry,
            client_jobs,
            counters: NodeCounters::default(),
            control: Mutex::new(HashMap::new()),
            publishers: RwLock::new(HashMap::new()),
            subscriptions: RwLock::new(Vec::new()),
            ack_counts: Mutex::new(HashMap::new()),
            timers: Mutex::new(Vec::new()),
            services: RwLock::new(HashMap::new()),
            calls: Mutex::new(HashMap::new()),
            action_servers: RwLock::new(HashMap::new()),
            goals: Mutex::new(HashMap::new()),
            params: Mutex::new(ParamStore::default()),
            housekeeping: Wakeup::new(),
            threads: Mutex::new(Vec::new()),
        });
        start_threads(&inner);
        let node = Node { inner };
        let reg = Advertisement {
            role: Role::Node,
            declared_type: PayloadType::Null,
            op: AdvertiseOp::Register,
        }
        .to_frame(name, node_id);
        if let Err(e) = node.inner.control_request(reg) {
            node.shutdown();
            return Err(e);
        }
        super::params::host_parameter_services(&node)?;
        Ok(node)
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    /// Entities to hand to an executor.
    pub fn registry(&self) -> Arc<EntityRegistry> {
        self.inner.registry.clone()
    }

    pub fn status(&self) -> NodeStatus {
        *self.inner.status.lock()
    }

    /// Waits until the node is connected; false on timeout, failure or
    /// shutdown.
    pub fn wait_connected(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.inner.status.lock();
        loop {
            match *st {
                NodeStatus::Connected => return true,
                NodeStatus::Failed | NodeStatus::Shutdown => return false,
                NodeStatus::Reconnecting => {
                    if self.inner.status_cond.wait_until(&mut st, deadline).timed_out() {
                        return *st == NodeStatus::Connected;
                    }
                }
            }
        }
    }

    pub fn counters(&self) -> &NodeCounters {
        &self.inner.counters
    }

    /// Asks the broker for the current graph.
    pub fn graph(&self) -> Result<GraphInfo, NodeError> {
        let req = Frame::new(FrameKind::InfoReq, "").with_correlation(self.inner.next_correlation());
        let reply = self.inner.control_request(req)?;
        serde_json::from_slice(&reply.payload).map_err(|e| NodeError::Rejected(format!("malformed graph reply: {e}")))
    }

    /// Forces the current connection closed, as if the broker had gone
    /// away. The node reconnects on its own.
    pub fn drop_connection(&self) {
        if let Some(c) = self.inner.conn.read().as_ref() {
            c.close();
        }
    }

    pub fn shutdown(&self) {
        self.inner.begin_shutdown();
        let me = std::thread::current().id();
        let threads: Vec<_> = self.inner.threads.lock().drain(..).collect();
        for t in threads {
            if t.thread().id() != me {
                let _ = t.join();
            }
        }
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a, stable across runs unlike the std hasher
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn start_threads(inner: &Arc<NodeInner>) {
    let weak = Arc::downgrade(inner);
    let dispatcher = std::thread::Builder::new()
        .name(format!("{}-dispatch", inner.name))
        .spawn(move || dispatch_loop(weak))
        .expect("spawn dispatcher");
    let weak = Arc::downgrade(inner);
    let wake = inner.housekeeping.clone();
    let housekeeping = std::thread::Builder::new()
        .name(format!("{}-housekeeping", inner.name))
        .spawn(move || housekeeping_loop(weak, wake))
        .expect("spawn housekeeping");
    inner.threads.lock().extend([dispatcher, housekeeping]);
}

fn dispatch_loop(weak: Weak<NodeInner>) {
    loop {
        let Some(node) = weak.upgrade() else { return };
        if node.is_shut_down() {
            return;
        }
        let conn = node.conn.read().clone();
        let Some(conn) = conn else {
            if !node.reconnect() {
                return;
            }
            continue;
        };
        match conn.recv_frame(RECV_POLL) {
            Ok(Some(frame)) => {
                *node.last_inbound.lock() = Instant::now();
                node.counters.frames_received.fetch_add(1, Ordering::Relaxed);
                node.dispatch(frame);
            }
            Ok(None) => {
                if node.last_inbound.lock().elapsed() > node.options.liveness_timeout() {
                    node.counters.liveness_failures.fetch_add(1, Ordering::Relaxed);
                    log::warn!("node {}: broker heartbeats missing, reconnecting", node.name);
                    node.connection_lost(&conn);
                }
            }
            Err(_) => {
                if !node.is_shut_down() {
                    log::warn!("node {}: connection lost, reconnecting", node.name);
                }
                node.connection_lost(&conn);
            }
        }
    }
}

fn housekeeping_loop(weak: Weak<NodeInner>, wake: Arc<Wakeup>) {
    loop {
        let next = {
            let Some(node) = weak.upgrade() else { return };
            if node.is_shut_down() {
                return;
            }
            node.housekeeping_tick(Instant::now())
        };
        let now = Instant::now();
        let sleep = next.map_or(HOUSEKEEPING_MAX_SLEEP, |t| t.saturating_duration_since(now));
        if !sleep.is_zero() {
            wake.wait(sleep.min(HOUSEKEEPING_MAX_SLEEP));
        }
    }
}

impl NodeInner {
    pub(crate) fn is_shut_down(&self) -> bool {
        self.shutdown.load(Ordering::Acquire)
    }

    fn set_status(&self, status: NodeStatus) {
        let mut st = self.status.lock();
        if *st != NodeStatus::Shutdown {
            *st = status;
        }
        self.status_cond.notify_all();
    }

    pub(crate) fn status(&self) -> NodeStatus {
        *self.status.lock()
    }

    fn begin_shutdown(&self) {
        if self.shutdown.swap(true, Ordering::AcqRel) {
            return;
        }
        self.set_status(NodeStatus::Shutdown);
        *self.status.lock() = NodeStatus::Shutdown;
        if let Some(c) = self.conn.write().take() {
            c.close();
        }
        self.housekeeping.notify();
        for p in self.publishers.read().values() {
            p.wake_blocked();
        }
        self.status_cond.notify_all();
    }

    pub(crate) fn next_correlation(&self) -> Correlation {
        Correlation(self.rng.lock().random())
    }

    pub(crate) fn wake_housekeeping(&self) {
        self.housekeeping.notify();
    }

    /// The error a send attempt should report right now, if any.
    pub(crate) fn unavailable(&self) -> Option<NodeError> {
        match self.status() {
            NodeStatus::Connected => None,
            NodeStatus::Reconnecting => Some(NodeError::NotConnected),
            NodeStatus::Failed => Some(NodeError::Failed),
            NodeStatus::Shutdown => Some(NodeError::Shutdown),
        }
    }

    pub(crate) fn send(&self, frame: Frame) -> Result<(), NodeError> {
        let conn = self.conn.read().clone();
        match conn {
            Some(c) => c.send_frame(frame).map_err(NodeError::from),
            None => Err(self.unavailable().unwrap_or(NodeError::NotConnected)),
        }
    }

    /// Sends a control frame and waits for the broker's reply, resending it
    /// until the reply arrives or the control timeout passes.
    pub(crate) fn control_request(&self, frame: Frame) -> Result<Frame, NodeError> {
        if let Some(e) = self.unavailable().filter(|e| !matches!(e, NodeError::NotConnected)) {
            return Err(e);
        }
        let timeout = self.options.control_timeout;
        let (tx, rx) = bounded(1);
        let key = (frame.kind, frame.correlation);
        let now = Instant::now();
        self.control.lock().insert(
            key,
            PendingControl {
                frame: frame.clone(),
                last_sent: now,
                deadline: now + timeout,
                waiter: Some(tx),
            },
        );
        let _ = self.send(frame);
        let reply = rx.recv_timeout(timeout);
        self.control.lock().remove(&key);
        match reply {
            Ok(reply) if reply.flags.is_error() => {
                Err(NodeError::Rejected(reply.error_message().unwrap_or_default()))
            }
            Ok(reply) => Ok(reply),
            Err(_) => Err(self.unavailable().unwrap_or(NodeError::ControlTimeout(timeout))),
        }
    }

    /// Sends a control frame whose reply nobody waits for; it is resent
    /// until acknowledged.
    pub(crate) fn control_fire(&self, frame: Frame) {
        let now = Instant::now();
        self.control.lock().insert(
            (frame.kind, frame.correlation),
            PendingControl {
                frame: frame.clone(),
                last_sent: now,
                deadline: now + REREGISTER_DEADLINE,
                waiter: None,
            },
        );
        let _ = self.send(frame);
    }

    /// Stops resending a control frame that is no longer wanted.
    pub(crate) fn cancel_control(&self, kind: FrameKind, correlation: Correlation) {
        self.control.lock().remove(&(kind, correlation));
    }

    fn on_control_reply(&self, frame: Frame) {
        let kind = match frame.kind {
            FrameKind::InfoResp => FrameKind::InfoReq,
            k => k,
        };
        let pending = self.control.lock().remove(&(kind, frame.correlation));
        match pending {
            Some(PendingControl { waiter: Some(tx), .. }) => {
                let _ = tx.try_send(frame);
            }
            Some(_) if frame.flags.is_error() => {
                log::warn!(
                    "node {}: broker rejected {} {}: {}",
                    self.name,
                    frame.kind,
                    frame.topic,
                    frame.error_message().unwrap_or_default()
                );
            }
            _ => {}
        }
    }

    fn dispatch(&self, frame: Frame) {
        match frame.kind {
            FrameKind::Data => self.on_data(frame),
            FrameKind::Ack => self.on_ack(frame),
            FrameKind::Heartbeat => {}
            FrameKind::Advertise | FrameKind::Sub | FrameKind::Unsub | FrameKind::InfoResp => {
                self.on_control_reply(frame)
            }
            FrameKind::SvcReq => self.on_service_request(frame),
            FrameKind::SvcResp => self.on_service_response(frame),
            FrameKind::ActionGoal => self.on_action_goal(frame),
            FrameKind::ActionCancel => self.on_action_cancel(frame),
            FrameKind::ActionFeedback => self.on_action_feedback(frame),
            FrameKind::ActionResult => self.on_action_result(frame),
            FrameKind::InfoReq => {}
        }
    }

    fn connection_lost(&self, conn: &SharedConnection) {
        conn.close();
        let mut slot = self.conn.write();
        if slot.as_ref().is_some_and(|c| Arc::ptr_eq(c, conn)) {
            *slot = None;
        }
        drop(slot);
        if !self.is_shut_down() {
            self.set_status(NodeStatus::Reconnecting);
        }
    }

    /// Reconnects with exponential backoff. False if the node should stop.
    fn reconnect(&self) -> bool {
        let mut attempt = 0u32;
        loop {
            if self.is_shut_down() {
                return false;
            }
            if self.options.reconnect_budget.is_some_and(|b| attempt >= b) {
                log::error!("node {}: reconnect budget exhausted", self.name);
                self.set_status(NodeStatus::Failed);
                self.fail_outstanding();
                return false;
            }
            attempt += 1;
            let delay = backoff_delay(
                self.options.reconnect_backoff_base,
                self.options.reconnect_backoff_max,
                attempt,
            );
            let until = Instant::now() + delay;
            while Instant::now() < until {
                if self.is_shut_down() {
                    return false;
                }
                std::thread::sleep((until - Instant::now()).min(Duration::from_millis(20)));
            }
            self.counters.reconnect_attempts.fetch_add(1, Ordering::Relaxed);
            match self.connector.connect() {
                Ok(conn) => {
                    *self.last_inbound.lock() = Instant::now();
                    *self.conn.write() = Some(conn);
                    self.reregister();
                    self.counters.reconnects.fetch_add(1, Ordering::Relaxed);
                    self.set_status(NodeStatus::Connected);
                    log::info!("node {}: reconnected after {} attempt(s)", self.name, attempt);
                    return true;
                }
                Err(e) => log::debug!("node {}: reconnect attempt {attempt} failed: {e}", self.name),
            }
        }
    }

    /// Replays every live registration on a fresh connection, then resumes
    /// retransmission of unacknowledged reliable frames.
    fn reregister(&self) {
        let node = Advertisement {
            role: Role::Node,
            declared_type: PayloadType::Null,
            op: AdvertiseOp::Register,
        };
        self.control_fire(node.to_frame(&self.name, self.node_id));
        for p in self.publishers.read().values() {
            self.control_fire(p.advertise_frame());
        }
        for s in self.subscriptions.read().iter() {
            self.control_fire(s.sub_frame());
        }
        for (name, s) in self.services.read().iter() {
            self.control_fire(s.register_frame(name));
        }
        for (name, a) in self.action_servers.read().iter() {
            self.control_fire(a.register_frame(name));
        }
        let now = Instant::now();
        for p in self.publishers.read().values() {
            for f in p.resend_all(now) {
                let _ = self.send(f);
            }
        }
    }

    fn fail_outstanding(&self) {
        let msg = "node failed: reconnect budget exhausted";
        self.fail_calls(msg);
        self.fail_goals(msg);
        for p in self.publishers.read().values() {
            p.wake_blocked();
        }
    }

    fn housekeeping_tick(&self, now: Instant) -> Option<Instant> {
        let mut next: Option<Instant> = None;
        let mut merge = |t: Option<Instant>| {
            if let Some(t) = t {
                next = Some(next.map_or(t, |n| n.min(t)));
            }
        };
        merge(self.poll_publishers(now));
        merge(self.poll_streams(now));
        merge(self.poll_timers(now));
        merge(self.poll_calls(now));
        merge(self.poll_goals(now));
        merge(self.poll_action_servers(now));
        merge(self.poll_control(now));
        next
    }

    fn poll_control(&self, now: Instant) -> Option<Instant> {
        if self.status() != NodeStatus::Connected {
            return None;
        }
        let mut resend = Vec::new();
        let mut next = None;
        {
            let mut ctl = self.control.lock();
            ctl.retain(|_, p| p.waiter.is_some() || p.deadline > now);
            for p in ctl.values_mut() {
                if now >= p.last_sent + CONTROL_RESEND {
                    p.last_sent = now;
                    resend.push(p.frame.clone());
                }
                let due = p.last_sent + CONTROL_RESEND;
                next = Some(next.map_or(due, |n: Instant| n.min(due)));
            }
        }
        for f in resend {
            self.counters.control_retransmissions.fetch_add(1, Ordering::Relaxed);
            let _ = self.send(f);
        }
        next
    }
}

impl Drop for NodeInner {
    fn drop(&mut self) {
        self.begin_shutdown();
    }
}
