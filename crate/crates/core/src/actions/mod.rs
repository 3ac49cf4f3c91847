//! Long-running goals with periodic feedback, cooperative cancellation and a
//! single terminal result.
//!
//! A server handler is a step function: the executor calls it repeatedly,
//! one step per scheduling turn, until it returns a terminal [`GoalStep`].
//! Many goals therefore progress side by side on one executor thread.

mod state;

use std::collections::{HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use thiserror::Error;

pub use state::{GoalError, GoalEvent, GoalRecord, GoalState};

use crate::envelope::control::{AdvertiseOp, Advertisement, Role};
use crate::envelope::{decode_typed_payload, encode_typed_payload, Correlation, Frame, FrameKind, PayloadType, Value};
use crate::executor::{panic_message, EntityId, Notifier, Schedulable};
use crate::nodegraph::node::NodeInner;
use crate::nodegraph::{Node, NodeError};
use crate::services::{CallError, Completion, TokenState};
use crate::transport::topic::{is_reserved, is_valid_topic};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ActionError {
    #[error(transparent)]
    Goal(#[from] GoalError),
    #[error("feedback not encodable: {0}")]
    Payload(String),
    #[error("feedback not sent: {0}")]
    Send(String),
}

/// What a handler step asks for next.
#[derive(Debug, Clone, PartialEq)]
pub enum GoalStep {
    /// Run another step at the next opportunity.
    Continue,
    /// Run the next step after this long, or earlier if a cancel arrives.
    Sleep(Duration),
    Succeeded(Value),
    Aborted(Value),
    /// Acknowledges a cancel request. Without one the goal ends ABORTED.
    Canceled(Value),
}

/// View of one goal handed to each handler step.
pub struct GoalContext<'a> {
    goal: &'a ServerGoal,
    server: &'a ActionServerEntity,
}

impl GoalContext<'_> {
    pub fn goal(&self) -> &Value {
        &self.goal.goal
    }

    pub fn goal_id(&self) -> Correlation {
        self.goal.id
    }

    /// True once the client asked to cancel. Handlers should poll this and
    /// finish with [`GoalStep::Canceled`].
    pub fn cancel_requested(&self) -> bool {
        self.goal.record.lock().state() == GoalState::Canceling
    }

    /// Sends feedback to the client and returns its sequence number.
    /// Feedback is best-effort and never retransmitted.
    pub fn publish_feedback(&self, value: impl Into<Value>) -> Result<u64, ActionError> {
        let (ty, body) = encode_typed_payload(&value.into()).map_err(|e| ActionError::Payload(e.to_string()))?;
        let mut record = self.goal.record.lock();
        let seq = record.next_feedback()?;
        let frame = Frame::new(FrameKind::ActionFeedback, self.server.name.clone())
            .with_correlation(self.goal.id)
            .with_sequence(seq)
            .with_payload(ty, body);
        drop(record);
        let node = self.server.node.upgrade().ok_or(ActionError::Send("node gone".into()))?;
        node.send(frame).map_err(|e| ActionError::Send(e.to_string()))?;
        Ok(seq)
    }
}

type GoalFn = Box<dyn FnMut(&mut GoalContext) -> GoalStep + Send>;
type Factory = Box<dyn FnMut(&Value) -> GoalFn + Send>;

struct ServerGoal {
    id: Correlation,
    goal: Value,
    record: Mutex<GoalRecord>,
    handler: Mutex<Option<GoalFn>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ActionServerStats {
    pub accepted: u64,
    pub rejected: u64,
    pub succeeded: u64,
    pub aborted: u64,
    pub canceled: u64,
}

#[derive(Default)]
struct ServerCounters {
    accepted: AtomicU64,
    rejected: AtomicU64,
    succeeded: AtomicU64,
    aborted: AtomicU64,
    canceled: AtomicU64,
}

pub(crate) struct ActionServerEntity {
    entity: EntityId,
    id: Correlation,
    name: String,
    goal_type: PayloadType,
    factory: Mutex<Factory>,
    goals: Mutex<HashMap<Correlation, Arc<ServerGoal>>>,
    ready: Mutex<VecDeque<Correlation>>,
    sleepers: Mutex<Vec<(Instant, Correlation)>>,
    notifier: Arc<Notifier>,
    node: Weak<NodeInner>,
    counters: ServerCounters,
}

impl ActionServerEntity {
    pub(crate) fn register_frame(&self, name: &str) -> Frame {
        self.advertisement(AdvertiseOp::Register).to_frame(name, self.id)
    }

    fn advertisement(&self, op: AdvertiseOp) -> Advertisement {
        Advertisement {
            role: Role::Action,
            declared_type: self.goal_type,
            op,
        }
    }

    fn send(&self, frame: Frame) {
        if let Some(node) = self.node.upgrade() {
            let _ = node.send(frame);
        }
    }

    fn reject(&self, frame: &Frame, msg: &str) {
        self.counters.rejected.fetch_add(1, Ordering::Relaxed);
        self.send(Frame::error_reply(FrameKind::ActionResult, &self.name, frame.correlation, msg));
    }

    fn accept(&self, frame: Frame) {
        if frame.payload_type != self.goal_type {
            let msg = format!("{}: goal type {} does not match {}", self.name, frame.payload_type, self.goal_type);
            return self.reject(&frame, &msg);
        }
        let goal = match decode_typed_payload(frame.payload_type, &frame.payload) {
            Ok(v) => v,
            Err(e) => return self.reject(&frame, &e.to_string()),
        };
        let id = frame.correlation;
        {
            let mut goals = self.goals.lock();
            if goals.contains_key(&id) {
                return;
            }
            goals.insert(
                id,
                Arc::new(ServerGoal {
                    id,
                    goal,
                    record: Mutex::new(GoalRecord::new(id)),
                    handler: Mutex::new(None),
                }),
            );
        }
        self.counters.accepted.fetch_add(1, Ordering::Relaxed);
        self.ready.lock().push_back(id);
        self.notifier.notify();
    }

    fn cancel(&self, id: Correlation) {
        let Some(goal) = self.goals.lock().get(&id).cloned() else { return };
        let mut record = goal.record.lock();
        match record.state() {
            GoalState::Pending => {
                record.apply(GoalEvent::CancelRequested).expect("pending goals can be canceled");
                drop(record);
                self.goals.lock().remove(&id);
                self.counters.canceled.fetch_add(1, Ordering::Relaxed);
                self.send(result_frame(&self.name, id, GoalState::Canceled, &Value::Null));
            }
            GoalState::Active => {
                record.apply(GoalEvent::CancelRequested).expect("active goals can be canceled");
                drop(record);
                // a sleeping handler gets to see the request now
                let mut sleepers = self.sleepers.lock();
                let before = sleepers.len();
                sleepers.retain(|(_, g)| *g != id);
                if sleepers.len() != before {
                    self.ready.lock().push_back(id);
                    self.notifier.notify();
                }
            }
            _ => {}
        }
    }

    fn finish(&self, goal: &ServerGoal, step: GoalStep) {
        let (event, value) = match step {
            GoalStep::Succeeded(v) => (GoalEvent::Succeed, v),
            GoalStep::Aborted(v) => (GoalEvent::Abort, v),
            GoalStep::Canceled(v) => {
                if goal.record.lock().state() == GoalState::Canceling {
                    (GoalEvent::ConfirmCancel, v)
                } else {
                    log::warn!("{}: goal {} canceled without a request, aborting", self.name, goal.id);
                    (GoalEvent::Abort, v)
                }
            }
            GoalStep::Continue | GoalStep::Sleep(_) => unreachable!("not a terminal step"),
        };
        let state = match goal.record.lock().finish(event, value.clone()) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("{}: goal {}: {e}", self.name, goal.id);
                return;
            }
        };
        match state {
            GoalState::Succeeded => &self.counters.succeeded,
            GoalState::Aborted => &self.counters.aborted,
            _ => &self.counters.canceled,
        }
        .fetch_add(1, Ordering::Relaxed);
        self.goals.lock().remove(&goal.id);
        self.send(result_frame(&self.name, goal.id, state, &value));
    }

    fn poll_sleepers(&self, now: Instant) -> Option<Instant> {
        let mut sleepers = self.sleepers.lock();
        let mut woke = false;
        let mut next: Option<Instant> = None;
        sleepers.retain(|(at, id)| {
            if *at <= now {
                self.ready.lock().push_back(*id);
                woke = true;
                false
            } else {
                next = Some(next.map_or(*at, |n| n.min(*at)));
                true
            }
        });
        drop(sleepers);
        if woke {
            self.notifier.notify();
        }
        next
    }
}

fn result_frame(name: &str, id: Correlation, state: GoalState, value: &Value) -> Frame {
    match encode_typed_payload(value) {
        Ok((ty, body)) => Frame::new(FrameKind::ActionResult, name)
            .with_correlation(id)
            .with_sequence(state.code())
            .with_payload(ty, body),
        Err(e) => Frame::error_reply(FrameKind::ActionResult, name, id, &format!("result not encodable: {e}")),
    }
}

impl Schedulable for ActionServerEntity {
    fn id(&self) -> EntityId {
        self.entity
    }

    fn label(&self) -> String {
        format!("action:{}", self.name)
    }

    fn has_work(&self) -> bool {
        !self.ready.lock().is_empty()
    }

    fn run_one(&self) -> Result<bool, String> {
        let Some(id) = self.ready.lock().pop_front() else {
            return Ok(false);
        };
        // canceled while pending
        let Some(goal) = self.goals.lock().get(&id).cloned() else {
            return Ok(true);
        };
        {
            let mut record = goal.record.lock();
            match record.state() {
                GoalState::Pending => {
                    record.apply(GoalEvent::Execute).map_err(|e| e.to_string())?;
                }
                s if s.is_terminal() => return Ok(true),
                _ => {}
            }
        }
        let mut slot = goal.handler.lock();
        if slot.is_none() {
            match catch_unwind(AssertUnwindSafe(|| (self.factory.lock())(&goal.goal))) {
                Ok(h) => *slot = Some(h),
                Err(p) => {
                    let msg = format!("handler panicked: {}", panic_message(p));
                    drop(slot);
                    self.finish(&goal, GoalStep::Aborted(Value::String(msg.clone())));
                    return Err(msg);
                }
            }
        }
        let handler = slot.as_mut().expect("handler created above");
        let mut ctx = GoalContext { goal: &goal, server: self };
        let step = catch_unwind(AssertUnwindSafe(|| handler(&mut ctx)));
        drop(slot);
        match step {
            Ok(GoalStep::Continue) => {
                self.ready.lock().push_back(id);
                self.notifier.notify();
            }
            Ok(GoalStep::Sleep(d)) => {
                self.sleepers.lock().push((Instant::now() + d, id));
                if let Some(node) = self.node.upgrade() {
                    node.wake_housekeeping();
                }
            }
            Ok(terminal) => self.finish(&goal, terminal),
            Err(p) => {
                let msg = format!("handler panicked: {}", panic_message(p));
                self.finish(&goal, GoalStep::Aborted(Value::String(msg.clone())));
                return Err(msg);
            }
        }
        Ok(true)
    }
}

/// Handle of a hosted action. Dropping it withdraws the registration;
/// goals still running are abandoned.
pub struct ActionServer {
    inner: Arc<ActionServerEntity>,
}

impl ActionServer {
    pub fn name(&self) -> &str {
        &self.inner.name
    }

    /// Goals accepted and not yet finished.
    pub fn active_goals(&self) -> usize {
        self.inner.goals.lock().len()
    }

    pub fn stats(&self) -> ActionServerStats {
        let c = &self.inner.counters;
        ActionServerStats {
            accepted: c.accepted.load(Ordering::Relaxed),
            rejected: c.rejected.load(Ordering::Relaxed),
            succeeded: c.succeeded.load(Ordering::Relaxed),
            aborted: c.aborted.load(Ordering::Relaxed),
            canceled: c.canceled.load(Ordering::Relaxed),
        }
    }
}

impl Drop for ActionServer {
    fn drop(&mut self) {
        let Some(node) = self.inner.node.upgrade() else { return };
        node.action_servers.write().remove(&self.inner.name);
        node.registry.remove(self.inner.entity);
        if !node.is_shut_down() {
            node.cancel_control(FrameKind::Advertise, self.inner.id);
            node.control_fire(self.inner.advertisement(AdvertiseOp::Withdraw).to_frame(&self.inner.name, self.inner.id));
        }
    }
}

/// One feedback message as seen by the client.
#[derive(Debug, Clone, PartialEq)]
pub struct Feedback {
    pub goal_id: Correlation,
    pub sequence: u64,
    pub value: Value,
}

/// Terminal state of a goal and the value the handler finished with.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalOutcome {
    pub state: GoalState,
    pub result: Value,
}

type FeedbackFn = Box<dyn FnMut(Feedback) + Send>;

pub(crate) struct GoalClient {
    goal_id: Correlation,
    action: String,
    token: Completion<GoalOutcome>,
    last_seq: Mutex<u64>,
    closed: AtomicBool,
    feedback: Option<Arc<Mutex<FeedbackFn>>>,
    feedback_accepted: AtomicU64,
    feedback_discarded: AtomicU64,
}

impl GoalClient {
    fn cancel_frame(&self) -> Frame {
        Frame::new(FrameKind::ActionCancel, self.action.clone()).with_correlation(self.goal_id)
    }
}

/// Client side of a submitted goal.
pub struct GoalHandle {
    client: Arc<GoalClient>,
    node: Weak<NodeInner>,
}

impl GoalHandle {
    pub fn goal_id(&self) -> Correlation {
        self.client.goal_id
    }

    pub fn action(&self) -> &str {
        &self.client.action
    }

    pub fn state(&self) -> TokenState {
        self.client.token.state()
    }

    pub fn token(&self) -> Completion<GoalOutcome> {
        self.client.token.clone()
    }

    pub fn wait(&self, max_wait: Duration) -> TokenState {
        self.client.token.wait(max_wait)
    }

    pub fn outcome(&self) -> Result<GoalOutcome, CallError> {
        self.client.token.result()
    }

    pub fn wait_outcome(&self, max_wait: Duration) -> Result<GoalOutcome, CallError> {
        self.client.token.wait_result(max_wait)
    }

    /// Feedback messages accepted so far, and ones dropped as duplicates or
    /// out of order.
    pub fn feedback_counts(&self) -> (u64, u64) {
        (
            self.client.feedback_accepted.load(Ordering::Relaxed),
            self.client.feedback_discarded.load(Ordering::Relaxed),
        )
    }

    /// Asks the server to cancel. Safe to repeat; a no-op once the goal has
    /// finished. The outcome still arrives through the handle.
    pub fn cancel(&self) {
        if self.client.closed.load(Ordering::Acquire) || self.client.token.state().is_terminal() {
            return;
        }
        if let Some(node) = self.node.upgrade() {
            let _ = node.send(self.client.cancel_frame());
        }
    }
}

impl Node {
    /// Hosts an action. For every accepted goal `factory` builds a step
    /// function which the executor then drives to completion.
    pub fn create_action_server<F, H>(
        &self,
        name: &str,
        goal_type: PayloadType,
        mut factory: F,
    ) -> Result<ActionServer, NodeError>
    where
        F: FnMut(&Value) -> H + Send + 'static,
        H: FnMut(&mut GoalContext) -> GoalStep + Send + 'static,
    {
        if !is_valid_topic(name) {
            return Err(NodeError::InvalidTopic(name.to_string()));
        }
        if is_reserved(name) {
            return Err(NodeError::ReservedName(name.to_string()));
        }
        let node = &self.inner;
        let inner = Arc::new(ActionServerEntity {
            entity: EntityId::next(),
            id: node.next_correlation(),
            name: name.to_string(),
            goal_type,
            factory: Mutex::new(Box::new(move |goal: &Value| -> GoalFn { Box::new(factory(goal)) })),
            goals: Mutex::new(HashMap::new()),
            ready: Mutex::new(VecDeque::new()),
            sleepers: Mutex::new(Vec::new()),
            notifier: node.registry.notifier(),
            node: Arc::downgrade(node),
            counters: ServerCounters::default(),
        });
        {
            let mut servers = node.action_servers.write();
            if servers.contains_key(name) {
                return Err(NodeError::Rejected(format!("action already registered: {name}")));
            }
            servers.insert(name.to_string(), inner.clone());
        }
        node.registry.add(inner.clone());
        if let Err(e) = node.control_request(inner.register_frame(name)) {
            node.action_servers.write().remove(name);
            node.registry.remove(inner.entity);
            return Err(e);
        }
        Ok(ActionServer { inner })
    }

    /// Submits a goal and returns at once.
    pub fn send_goal(&self, name: &str, goal: impl Into<Value>, timeout: Duration) -> GoalHandle {
        self.submit_goal(name, goal.into(), timeout, None)
    }

    /// Submits a goal whose feedback is delivered to `on_feedback` on this
    /// node's executor, in sequence order. The outcome is published only
    /// after every earlier feedback callback has run, so the node must be
    /// spun for the handle to resolve.
    pub fn send_goal_with_feedback(
        &self,
        name: &str,
        goal: impl Into<Value>,
        timeout: Duration,
        on_feedback: impl FnMut(Feedback) + Send + 'static,
    ) -> GoalHandle {
        let cb: FeedbackFn = Box::new(on_feedback);
        self.submit_goal(name, goal.into(), timeout, Some(Arc::new(Mutex::new(cb))))
    }

    fn submit_goal(
        &self,
        name: &str,
        goal: Value,
        timeout: Duration,
        feedback: Option<Arc<Mutex<FeedbackFn>>>,
    ) -> GoalHandle {
        let node = &self.inner;
        let goal_id = node.next_correlation();
        let client = Arc::new(GoalClient {
            goal_id,
            action: name.to_string(),
            token: Completion::new(goal_id, Instant::now() + timeout),
            last_seq: Mutex::new(0),
            closed: AtomicBool::new(false),
            feedback,
            feedback_accepted: AtomicU64::new(0),
            feedback_discarded: AtomicU64::new(0),
        });
        let handle = GoalHandle {
            client: client.clone(),
            node: Arc::downgrade(node),
        };
        let fail = |msg: String| {
            client.closed.store(true, Ordering::Release);
            client.token.complete(Err(CallError::Failed(msg)));
        };
        if let Some(e) = node.unavailable() {
            fail(e.to_string());
            return handle;
        }
        let (ty, body) = match encode_typed_payload(&goal) {
            Ok(p) => p,
            Err(e) => {
                fail(e.to_string());
                return handle;
            }
        };
        node.goals.lock().insert(goal_id, client.clone());
        let frame = Frame::new(FrameKind::ActionGoal, name)
            .with_correlation(goal_id)
            .with_payload(ty, body);
        if let Err(e) = node.send(frame) {
            node.goals.lock().remove(&goal_id);
            fail(e.to_string());
        }
        handle
    }
}

impl NodeInner {
    pub(crate) fn on_action_goal(&self, frame: Frame) {
        let server = self.action_servers.read().get(&frame.topic).cloned();
        match server {
            Some(s) => s.accept(frame),
            None => {
                let msg = format!("no such action: {}", frame.topic);
                let _ = self.send(Frame::error_reply(FrameKind::ActionResult, &frame.topic, frame.correlation, &msg));
            }
        }
    }

    pub(crate) fn on_action_cancel(&self, frame: Frame) {
        let server = self.action_servers.read().get(&frame.topic).cloned();
        if let Some(s) = server {
            s.cancel(frame.correlation);
        }
    }

    pub(crate) fn on_action_feedback(&self, frame: Frame) {
        let Some(client) = self.goals.lock().get(&frame.correlation).cloned() else {
            return;
        };
        if client.closed.load(Ordering::Acquire) {
            return;
        }
        let mut last = client.last_seq.lock();
        if frame.sequence <= *last {
            client.feedback_discarded.fetch_add(1, Ordering::Relaxed);
            return;
        }
        let Ok(value) = decode_typed_payload(frame.payload_type, &frame.payload) else {
            client.feedback_discarded.fetch_add(1, Ordering::Relaxed);
            return;
        };
        *last = frame.sequence;
        client.feedback_accepted.fetch_add(1, Ordering::Relaxed);
        if let Some(cb) = &client.feedback {
            let cb = cb.clone();
            let fb = Feedback {
                goal_id: client.goal_id,
                sequence: frame.sequence,
                value,
            };
            self.client_jobs.push(move || {
                (cb.lock())(fb);
                Ok(())
            });
        }
    }

    pub(crate) fn on_action_result(&self, frame: Frame) {
        let Some(client) = self.goals.lock().remove(&frame.correlation) else {
            self.counters.stale_responses.fetch_add(1, Ordering::Relaxed);
            return;
        };
        client.closed.store(true, Ordering::Release);
        let outcome = if frame.flags.is_error() {
            Err(CallError::Failed(frame.error_message().unwrap_or_default()))
        } else {
            match GoalState::from_code(frame.sequence).filter(|s| s.is_terminal()) {
                None => Err(CallError::Failed(format!("invalid goal state code {}", frame.sequence))),
                Some(state) => decode_typed_payload(frame.payload_type, &frame.payload)
                    .map(|result| GoalOutcome { state, result })
                    .map_err(|e| CallError::Failed(e.to_string())),
            }
        };
        if client.feedback.is_some() {
            self.client_jobs.push(move || {
                client.token.complete(outcome);
                Ok(())
            });
        } else {
            client.token.complete(outcome);
        }
    }

    pub(crate) fn poll_goals(&self, now: Instant) -> Option<Instant> {
        let mut expired = Vec::new();
        let mut next: Option<Instant> = None;
        self.goals.lock().retain(|_, c| {
            let d = c.token.deadline();
            if now >= d {
                expired.push(c.clone());
                false
            } else {
                next = Some(next.map_or(d, |n| n.min(d)));
                true
            }
        });
        for c in expired {
            c.closed.store(true, Ordering::Release);
            c.token.complete(Err(CallError::TimedOut));
            let _ = self.send(c.cancel_frame());
        }
        next
    }

    pub(crate) fn poll_action_servers(&self, now: Instant) -> Option<Instant> {
        let servers: Vec<_> = self.action_servers.read().values().cloned().collect();
        servers
            .iter()
            .filter_map(|s| s.poll_sleepers(now))
            .min()
    }

    pub(crate) fn fail_goals(&self, msg: &str) {
        let drained: Vec<_> = self.goals.lock().drain().map(|(_, c)| c).collect();
        for c in drained {
            c.closed.store(true, Ordering::Release);
            c.token.complete(Err(CallError::Failed(msg.to_string())));
        }
    }
}
