//! Request/response services. Calls never block: [`Node::call_async`]
//! returns a [`CompletionToken`] at once and responses are matched to their
//! calls strictly by correlation id.

mod completion;

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::Mutex;

pub use completion::{CallError, Completion, CompletionToken, TokenState};

use crate::envelope::control::{AdvertiseOp, Advertisement, Role};
use crate::envelope::{
    decode_typed_payload, encode_typed_payload, now_nanos, Correlation, Frame, FrameKind, PayloadType, Value,
};
use crate::executor::{panic_message, EntityId, Notifier, Schedulable};
use crate::nodegraph::{Node, NodeError};
use crate::nodegraph::node::NodeInner;
use crate::transport::topic::{is_reserved, is_valid_topic};

pub const DEFAULT_CALL_TIMEOUT: Duration = Duration::from_secs(5);

type TypedFn = Box<dyn FnMut(Value) -> Result<Value, String> + Send>;
type RawFn = Box<dyn FnMut(&Frame) -> Result<Value, String> + Send>;

/// Request handler. A returned `Err` reaches the caller as a failed call
/// carrying the message.
pub enum ServiceHandler {
    Typed(TypedFn),
    Raw(RawFn),
}

impl ServiceHandler {
    pub fn typed(f: impl FnMut(Value) -> Result<Value, String> + Send + 'static) -> ServiceHandler {
        ServiceHandler::Typed(Box::new(f))
    }

    /// Handler that decodes the request frame itself.
    pub fn raw(f: impl FnMut(&Frame) -> Result<Value, String> + Send + 'static) -> ServiceHandler {
        ServiceHandler::Raw(Box::new(f))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServiceStats {
    pub handled: u64,
    pub errors: u64,
}

pub(crate) struct ServiceEntity {
    entity: EntityId,
    id: Correlation,
    name: String,
    request_type: Option<PayloadType>,
    response_type: Option<PayloadType>,
    handler: Mutex<ServiceHandler>,
    queue: Mutex<VecDeque<Frame>>,
    notifier: Arc<Notifier>,
    node: Weak<NodeInner>,
    handled: AtomicU64,
    errors: AtomicU64,
}

impl ServiceEntity {
    pub(crate) fn register_frame(&self, name: &str) -> Frame {
        Advertisement {
            role: Role::Service,
            declared_type: self.request_type.unwrap_or(PayloadType::Null),
            op: AdvertiseOp::Register,
        }
        .to_frame(name, self.id)
    }

    fn withdraw_frame(&self) -> Frame {
        Advertisement {
            role: Role::Service,
            declared_type: self.request_type.unwrap_or(PayloadType::Null),
            op: AdvertiseOp::Withdraw,
        }
        .to_frame(&self.name, self.id)
    }

    fn enqueue(&self, frame: Frame) {
        self.queue.lock().push_back(frame);
        self.notifier.notify();
    }

    fn handle(&self, req: &Frame) -> Result<Value, String> {
        if let Some(expected) = self.request_type {
            if req.payload_type != expected {
                return Err(format!(
                    "{}: request type {} does not match {}",
                    self.name, req.payload_type, expected
                ));
            }
        }
        let mut handler = self.handler.lock();
        let out = match &mut *handler {
            ServiceHandler::Typed(f) => {
                let value = decode_typed_payload(req.payload_type, &req.payload).map_err(|e| e.to_string())?;
                catch_unwind(AssertUnwindSafe(|| f(value)))
            }
            ServiceHandler::Raw(f) => catch_unwind(AssertUnwindSafe(|| f(req))),
        };
        let value = out.map_err(|p| format!("handler panicked: {}", panic_message(p)))??;
        if let Some(expected) = self.response_type {
            if value.payload_type() != expected {
                return Err(format!(
                    "{}: handler returned {} instead of {}",
                    self.name,
                    value.payload_type(),
                    expected
                ));
            }
        }
        Ok(value)
    }
}

impl Schedulable for ServiceEntity {
    fn id(&self) -> EntityId {
        self.entity
    }

    fn label(&self) -> String {
        format!("service:{}", self.name)
    }

    fn has_work(&self) -> bool {
        !self.queue.lock().is_empty()
    }

    fn run_one(&self) -> Result<bool, String> {
        let Some(req) = self.queue.lock().pop_front() else {
            return Ok(false);
        };
        let outcome = self.handle(&req).and_then(|v| encode_typed_payload(&v).map_err(|e| e.to_string()));
        self.handled.fetch_add(1, Ordering::Relaxed);
        let reply = match &outcome {
            Ok((ty, body)) => Frame::new(FrameKind::SvcResp, req.topic.clone())
                .with_correlation(req.correlation)
                .with_payload(*ty, body.clone()),
            Err(msg) => {
                self.errors.fetch_add(1, Ordering::Relaxed);
                Frame::error_reply(FrameKind::SvcResp, &req.topic, req.correlation, msg)
            }
        };
        if let Some(node) = self.node.upgrade() {
            let _ = node.send(reply);
        }
        outcome.map(|_| true)
    }
}

/// A call awaiting its response.
pub(crate) struct PendingCall {
    token: CompletionToken,
}

/// Handle of a hosted service. Dropping it withdraws the registration.
pub struct ServiceServer {
    inner: Arc<ServiceEntity>,
}

impl ServiceServer {
    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn stats(&self) -> ServiceStats {
        ServiceStats {
            handled: self.inner.handled.load(Ordering::Relaxed),
            errors: self.inner.errors.load(Ordering::Relaxed),
        }
    }
}

impl Drop for ServiceServer {
    fn drop(&mut self) {
        let Some(node) = self.inner.node.upgrade() else { return };
        node.services.write().remove(&self.inner.name);
        node.registry.remove(self.inner.entity);
        if !node.is_shut_down() {
            node.cancel_control(FrameKind::Advertise, self.inner.id);
            node.control_fire(self.inner.withdraw_frame());
        }
    }
}

impl Node {
    /// Hosts a service. Requests whose type differs from `request_type`, and
    /// handler results whose type differs from `response_type`, are answered
    /// with an error.
    pub fn create_service(
        &self,
        name: &str,
        request_type: PayloadType,
        response_type: PayloadType,
        handler: impl FnMut(Value) -> Result<Value, String> + Send + 'static,
    ) -> Result<ServiceServer, NodeError> {
        if !is_valid_topic(name) {
            return Err(NodeError::InvalidTopic(name.to_string()));
        }
        if is_reserved(name) {
            return Err(NodeError::ReservedName(name.to_string()));
        }
        let inner = self.register_service(
            name,
            Some(request_type),
            Some(response_type),
            ServiceHandler::typed(handler),
        )?;
        Ok(ServiceServer { inner })
    }

    /// Hosts an internal service for the lifetime of the node.
    pub(crate) fn host_service(&self, name: &str, handler: ServiceHandler) -> Result<(), NodeError> {
        self.register_service(name, None, None, handler).map(|_| ())
    }

    fn register_service(
        &self,
        name: &str,
        request_type: Option<PayloadType>,
        response_type: Option<PayloadType>,
        handler: ServiceHandler,
    ) -> Result<Arc<ServiceEntity>, NodeError> {
        let node = &self.inner;
        let entity = Arc::new(ServiceEntity {
            entity: EntityId::next(),
            id: node.next_correlation(),
            name: name.to_string(),
            request_type,
            response_type,
            handler: Mutex::new(handler),
            queue: Mutex::new(VecDeque::new()),
            notifier: node.registry.notifier(),
            node: Arc::downgrade(node),
            handled: AtomicU64::new(0),
            errors: AtomicU64::new(0),
        });
        {
            let mut services = node.services.write();
            if services.contains_key(name) {
                return Err(NodeError::Rejected(format!("service already registered: {name}")));
            }
            services.insert(name.to_string(), entity.clone());
        }
        node.registry.add(entity.clone());
        if let Err(e) = node.control_request(entity.register_frame(name)) {
            node.services.write().remove(name);
            node.registry.remove(entity.entity);
            return Err(e);
        }
        Ok(entity)
    }

    /// Sends a request and returns at once. The token resolves with the
    /// response, with FAILED if the service is unknown or the handler
    /// failed, or with TIMED_OUT after `timeout`.
    pub fn call_async(&self, name: &str, request: impl Into<Value>, timeout: Duration) -> CompletionToken {
        match encode_typed_payload(&request.into()) {
            Ok((ty, body)) => self.call_payload(name, ty, body, timeout),
            Err(e) => {
                let token = CompletionToken::new(self.inner.next_correlation(), Instant::now() + timeout);
                token.complete(Err(CallError::Failed(e.to_string())));
                token
            }
        }
    }

    /// Blocking call: `call_async` followed by a wait.
    pub fn call(&self, name: &str, request: impl Into<Value>, timeout: Duration) -> Result<Value, CallError> {
        self.call_async(name, request, timeout).wait_result(timeout)
    }

    pub(crate) fn call_payload(&self, name: &str, ty: PayloadType, body: Bytes, timeout: Duration) -> CompletionToken {
        let node = &self.inner;
        let correlation = node.next_correlation();
        let token = CompletionToken::new(correlation, Instant::now() + timeout);
        if let Some(e) = node.unavailable() {
            token.complete(Err(CallError::Failed(e.to_string())));
            return token;
        }
        node.calls.lock().insert(correlation, PendingCall { token: token.clone() });
        let mut frame = Frame::new(FrameKind::SvcReq, name)
            .with_correlation(correlation)
            .with_payload(ty, body);
        frame.timestamp_send = now_nanos();
        if let Err(e) = node.send(frame) {
            node.calls.lock().remove(&correlation);
            token.complete(Err(CallError::Failed(e.to_string())));
        }
        token
    }
}

impl NodeInner {
    pub(crate) fn on_service_request(&self, frame: Frame) {
        let service = self.services.read().get(&frame.topic).cloned();
        match service {
            Some(s) => s.enqueue(frame),
            None => {
                let msg = format!("no such service: {}", frame.topic);
                let _ = self.send(Frame::error_reply(FrameKind::SvcResp, &frame.topic, frame.correlation, &msg));
            }
        }
    }

    pub(crate) fn on_service_response(&self, frame: Frame) {
        let Some(call) = self.calls.lock().remove(&frame.correlation) else {
            self.counters.stale_responses.fetch_add(1, Ordering::Relaxed);
            return;
        };
        let outcome = if frame.flags.is_error() {
            Err(CallError::Failed(frame.error_message().unwrap_or_default()))
        } else {
            decode_typed_payload(frame.payload_type, &frame.payload).map_err(|e| CallError::Failed(e.to_string()))
        };
        if !call.token.complete(outcome) {
            self.counters.stale_responses.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub(crate) fn poll_calls(&self, now: Instant) -> Option<Instant> {
        let mut calls = self.calls.lock();
        let mut next: Option<Instant> = None;
        calls.retain(|_, c| {
            let d = c.token.deadline();
            if now >= d {
                c.token.complete(Err(CallError::TimedOut));
                false
            } else {
                next = Some(next.map_or(d, |n| n.min(d)));
                true
            }
        });
        next
    }

    pub(crate) fn fail_calls(&self, msg: &str) {
        let drained: Vec<_> = self.calls.lock().drain().map(|(_, c)| c).collect();
        for c in drained {
            c.token.complete(Err(CallError::Failed(msg.to_string())));
        }
    }
}
