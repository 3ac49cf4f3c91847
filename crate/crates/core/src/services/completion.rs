use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::envelope::{Correlation, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenState {
    Pending,
    Ready,
    Failed,
    TimedOut,
}

impl TokenState {
    pub fn is_terminal(self) -> bool {
        self != TokenState::Pending
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CallError {
    #[error("call failed: {0}")]
    Failed(String),
    #[error("call timed out")]
    TimedOut,
    #[error("call still pending")]
    Pending,
}

struct Slot<T> {
    state: TokenState,
    value: Option<T>,
    error: Option<String>,
}

struct Shared<T> {
    slot: Mutex<Slot<T>>,
    cond: Condvar,
}

/// Result of an asynchronous request. Moves from PENDING to exactly one
/// terminal state; the first completion wins and later ones are ignored.
///
/// Once the deadline passes, a still-pending completion reads as TIMED_OUT
/// even if no housekeeping has run yet.
pub struct Completion<T> {
    correlation: Correlation,
    deadline: Instant,
    shared: Arc<Shared<T>>,
}

/// Completion of a service call.
pub type CompletionToken = Completion<Value>;

impl<T> Clone for Completion<T> {
    fn clone(&self) -> Self {
        Completion {
            correlation: self.correlation,
            deadline: self.deadline,
            shared: self.shared.clone(),
        }
    }
}

impl<T> std::fmt::Debug for Completion<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Completion")
            .field("correlation", &self.correlation)
            .field("state", &self.shared.slot.lock().state)
            .finish()
    }
}

impl<T: Clone> Completion<T> {
    pub fn new(correlation: Correlation, deadline: Instant) -> Completion<T> {
        Completion {
            correlation,
            deadline,
            shared: Arc::new(Shared {
                slot: Mutex::new(Slot {
                    state: TokenState::Pending,
                    value: None,
                    error: None,
                }),
                cond: Condvar::new(),
            }),
        }
    }

    pub fn correlation(&self) -> Correlation {
        self.correlation
    }

    pub fn deadline(&self) -> Instant {
        self.deadline
    }

    fn expire(&self, slot: &mut Slot<T>, now: Instant) {
        if slot.state == TokenState::Pending && now >= self.deadline {
            slot.state = TokenState::TimedOut;
            self.shared.cond.notify_all();
        }
    }

    /// Current state without blocking.
    pub fn state(&self) -> TokenState {
        let mut slot = self.shared.slot.lock();
        self.expire(&mut slot, Instant::now());
        slot.state
    }

    /// Blocks until the completion is terminal or `max_wait` elapses and
    /// returns the state seen last. Any number of threads may wait at once.
    pub fn wait(&self, max_wait: Duration) -> TokenState {
        let until = Instant::now() + max_wait;
        let mut slot = self.shared.slot.lock();
        loop {
            let now = Instant::now();
            self.expire(&mut slot, now);
            if slot.state.is_terminal() || now >= until {
                return slot.state;
            }
            let wake = until.min(self.deadline);
            self.shared.cond.wait_until(&mut slot, wake);
        }
    }

    /// Snapshot of the outcome: `Err(CallError::Pending)` while pending.
    pub fn result(&self) -> Result<T, CallError> {
        let mut slot = self.shared.slot.lock();
        self.expire(&mut slot, Instant::now());
        Self::outcome(&slot)
    }

    pub fn wait_result(&self, max_wait: Duration) -> Result<T, CallError> {
        self.wait(max_wait);
        self.result()
    }

    fn outcome(slot: &Slot<T>) -> Result<T, CallError> {
        match slot.state {
            TokenState::Pending => Err(CallError::Pending),
            TokenState::Ready => Ok(slot.value.clone().expect("ready completion holds a value")),
            TokenState::Failed => Err(CallError::Failed(slot.error.clone().unwrap_or_default())),
            TokenState::TimedOut => Err(CallError::TimedOut),
        }
    }

    /// Resolves the completion. False if it was already terminal.
    pub(crate) fn complete(&self, outcome: Result<T, CallError>) -> bool {
        let mut slot = self.shared.slot.lock();
        if slot.state.is_terminal() {
            return false;
        }
        match outcome {
            Ok(v) => {
                slot.state = TokenState::Ready;
                slot.value = Some(v);
            }
            Err(CallError::Failed(msg)) => {
                slot.state = TokenState::Failed;
                slot.error = Some(msg);
            }
            Err(CallError::TimedOut) => slot.state = TokenState::TimedOut,
            Err(CallError::Pending) => return false,
        }
        self.shared.cond.notify_all();
        true
    }
}
