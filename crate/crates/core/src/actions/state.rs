use thiserror::Error;

use crate::envelope::{Correlation, Value};

/// Lifecycle of an action goal. The discriminant is the code carried in the
/// `sequence` field of ACTION_RESULT frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum GoalState {
    Pending = 0,
    Active = 1,
    Canceling = 2,
    Succeeded = 3,
    Aborted = 4,
    Canceled = 5,
}

impl GoalState {
    pub const ALL: [GoalState; 6] = [
        GoalState::Pending,
        GoalState::Active,
        GoalState::Canceling,
        GoalState::Succeeded,
        GoalState::Aborted,
        GoalState::Canceled,
    ];

    pub fn from_code(code: u64) -> Option<GoalState> {
        Self::ALL.get(usize::try_from(code).ok()?).copied()
    }

    pub fn code(self) -> u64 {
        self as u64
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, GoalState::Succeeded | GoalState::Aborted | GoalState::Canceled)
    }

    pub fn name(self) -> &'static str {
        match self {
            GoalState::Pending => "PENDING",
            GoalState::Active => "ACTIVE",
            GoalState::Canceling => "CANCELING",
            GoalState::Succeeded => "SUCCEEDED",
            GoalState::Aborted => "ABORTED",
            GoalState::Canceled => "CANCELED",
        }
    }

    /// Whether `self → to` is a legal transition.
    pub fn can_become(self, to: GoalState) -> bool {
        use GoalState::*;
        matches!(
            (self, to),
            (Pending, Active)
                | (Pending, Canceled)
                | (Active, Succeeded)
                | (Active, Aborted)
                | (Active, Canceling)
                | (Canceling, Canceled)
                | (Canceling, Succeeded)
                | (Canceling, Aborted)
        )
    }
}

impl std::fmt::Display for GoalState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Something that happens to a goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GoalEvent {
    /// The handler starts running.
    Execute,
    CancelRequested,
    Succeed,
    Abort,
    /// The handler acknowledged a cancel request.
    ConfirmCancel,
}

impl GoalEvent {
    pub const ALL: [GoalEvent; 5] = [
        GoalEvent::Execute,
        GoalEvent::CancelRequested,
        GoalEvent::Succeed,
        GoalEvent::Abort,
        GoalEvent::ConfirmCancel,
    ];

    /// State reached by applying the event, or `None` if the event is not
    /// allowed in `state`.
    pub fn apply(self, state: GoalState) -> Option<GoalState> {
        use GoalState::*;
        let to = match (self, state) {
            (GoalEvent::Execute, Pending) => Active,
            (GoalEvent::CancelRequested, Pending) => Canceled,
            (GoalEvent::CancelRequested, Active) => Canceling,
            (GoalEvent::Succeed, Active | Canceling) => Succeeded,
            (GoalEvent::Abort, Active | Canceling) => Aborted,
            (GoalEvent::ConfirmCancel, Canceling) => Canceled,
            _ => return None,
        };
        debug_assert!(state.can_become(to));
        Some(to)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GoalError {
    #[error("goal in state {state} cannot take event {event:?}")]
    IllegalTransition { state: GoalState, event: GoalEvent },
    #[error("goal already finished as {0}")]
    Finished(GoalState),
}

/// Server-side bookkeeping of one goal.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalRecord {
    pub goal_id: Correlation,
    state: GoalState,
    feedback_seq: u64,
    result: Option<Value>,
}

impl GoalRecord {
    pub fn new(goal_id: Correlation) -> GoalRecord {
        GoalRecord {
            goal_id,
            state: GoalState::Pending,
            feedback_seq: 0,
            result: None,
        }
    }

    pub fn state(&self) -> GoalState {
        self.state
    }

    /// Sequence number of the last feedback sent; 0 before any.
    pub fn feedback_seq(&self) -> u64 {
        self.feedback_seq
    }

    /// Present exactly when the state is terminal.
    pub fn result(&self) -> Option<&Value> {
        self.result.as_ref()
    }

    /// Applies a non-terminating event.
    pub fn apply(&mut self, event: GoalEvent) -> Result<GoalState, GoalError> {
        let to = event.apply(self.state).ok_or(GoalError::IllegalTransition {
            state: self.state,
            event,
        })?;
        self.state = to;
        if to.is_terminal() && self.result.is_none() {
            self.result = Some(Value::Null);
        }
        Ok(to)
    }

    /// Applies a terminating event and stores the result.
    pub fn finish(&mut self, event: GoalEvent, result: Value) -> Result<GoalState, GoalError> {
        let to = event.apply(self.state).ok_or(GoalError::IllegalTransition {
            state: self.state,
            event,
        })?;
        if !to.is_terminal() {
            return Err(GoalError::IllegalTransition {
                state: self.state,
                event,
            });
        }
        self.state = to;
        self.result = Some(result);
        Ok(to)
    }

    /// Reserves the next feedback sequence number.
    pub fn next_feedback(&mut self) -> Result<u64, GoalError> {
        if self.state.is_terminal() {
            return Err(GoalError::Finished(self.state));
        }
        self.feedback_seq += 1;
        Ok(self.feedback_seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use GoalState::*;

    #[test]
    fn transition_table_is_exact() {
        let legal = [
            (Pending, Active),
            (Pending, Canceled),
            (Active, Succeeded),
            (Active, Aborted),
            (Active, Canceling),
            (Canceling, Canceled),
            (Canceling, Succeeded),
            (Canceling, Aborted),
        ];
        for from in GoalState::ALL {
            for to in GoalState::ALL {
                assert_eq!(from.can_become(to), legal.contains(&(from, to)), "{from} -> {to}");
            }
        }
    }

    #[test]
    fn events_only_take_legal_edges() {
        let mut reached = std::collections::HashSet::new();
        for s in GoalState::ALL {
            for e in GoalEvent::ALL {
                if let Some(to) = e.apply(s) {
                    assert!(s.can_become(to));
                    reached.insert((s, to));
                }
                if s.is_terminal() {
                    assert_eq!(e.apply(s), None);
                }
            }
        }
        assert_eq!(reached.len(), 8);
    }

    #[test]
    fn result_present_iff_terminal() {
        let mut g = GoalRecord::new(Correlation::from_u128(1));
        assert!(g.result().is_none());
        g.apply(GoalEvent::Execute).unwrap();
        assert_eq!(g.next_feedback(), Ok(1));
        assert_eq!(g.next_feedback(), Ok(2));
        g.finish(GoalEvent::Succeed, Value::Int64(0)).unwrap();
        assert_eq!(g.result(), Some(&Value::Int64(0)));
        assert_eq!(g.next_feedback(), Err(GoalError::Finished(Succeeded)));
        assert!(g.apply(GoalEvent::CancelRequested).is_err());
        assert_eq!(g.state(), Succeeded);
    }

    #[test]
    fn pending_cancel_is_immediate() {
        let mut g = GoalRecord::new(Correlation::from_u128(1));
        assert_eq!(g.apply(GoalEvent::CancelRequested), Ok(Canceled));
        assert!(g.result().is_some());
    }

    #[test]
    fn codes_round_trip() {
        for s in GoalState::ALL {
            assert_eq!(GoalState::from_code(s.code()), Some(s));
        }
        assert_eq!(GoalState::from_code(6), None);
    }
}
