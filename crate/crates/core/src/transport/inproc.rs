//! In-process transport. Brokers register under a string key; connections
//! hand frames straight to the broker core on the sender's thread and
//! receive through a bounded channel.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, LazyLock, Weak};
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError};
use parking_lot::Mutex;

use crate::envelope::Frame;

use super::broker::{BrokerCore, ConnId};
use super::{Connection, SharedConnection, TransportError};

static REGISTRY: LazyLock<Mutex<HashMap<String, Weak<BrokerCore>>>> = LazyLock::new(|| Mutex::new(HashMap::new()));

pub(crate) fn register(key: &str, core: &Arc<BrokerCore>) -> Result<(), TransportError> {
    let mut reg = REGISTRY.lock();
    if let Some(existing) = reg.get(key).and_then(Weak::upgrade) {
        if !existing.is_shut_down() {
            return Err(TransportError::AddressInUse(format!("inproc://{key}")));
        }
    }
    reg.insert(key.to_string(), Arc::downgrade(core));
    Ok(())
}

pub(crate) fn unregister(key: &str, core: &Arc<BrokerCore>) {
    let mut reg = REGISTRY.lock();
    if reg.get(key).is_some_and(|w| w.as_ptr() == Arc::as_ptr(core)) {
        reg.remove(key);
    }
}

pub(crate) fn connect(key: &str) -> Result<SharedConnection, TransportError> {
    let core = REGISTRY
        .lock()
        .get(key)
        .and_then(Weak::upgrade)
        .filter(|c| !c.is_shut_down())
        .ok_or_else(|| TransportError::ConnectionRefused(format!("inproc://{key}")))?;
    let (tx, rx) = bounded(core.config().outbound_capacity);
    let id = core
        .attach(tx, None)
        .ok_or_else(|| TransportError::ConnectionRefused(format!("inproc://{key}")))?;
    Ok(Arc::new(InprocConnection {
        core: Arc::downgrade(&core),
        id,
        inbound: rx,
        closed: AtomicBool::new(false),
    }))
}

pub struct InprocConnection {
    core: Weak<BrokerCore>,
    id: ConnId,
    inbound: Receiver<Frame>,
    closed: AtomicBool,
}

impl Connection for InprocConnection {
    fn send_frame(&self, frame: Frame) -> Result<(), TransportError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(TransportError::Closed);
        }
        frame.validate()?;
        match self.core.upgrade() {
            Some(core) if !core.is_shut_down() => {
                core.handle(self.id, frame);
                Ok(())
            }
            _ => {
                self.closed.store(true, Ordering::Release);
                Err(TransportError::Closed)
            }
        }
    }

    fn recv_frame(&self, timeout: Duration) -> Result<Option<Frame>, TransportError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(TransportError::Closed);
        }
        match self.inbound.recv_timeout(timeout) {
            Ok(f) => Ok(Some(f)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => {
                self.closed.store(true, Ordering::Release);
                Err(TransportError::Closed)
            }
        }
    }

    fn close(&self) {
        if !self.closed.swap(true, Ordering::AcqRel) {
            if let Some(core) = self.core.upgrade() {
                core.detach(self.id);
            }
        }
    }

    fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }
}

impl Drop for InprocConnection {
    fn drop(&mut self) {
        self.close();
    }
}
