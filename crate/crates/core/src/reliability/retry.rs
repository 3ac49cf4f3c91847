//! Publisher-side retransmission bookkeeping.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::envelope::Frame;

use super::QosProfile;

#[derive(Debug, Clone)]
pub struct RetryState {
    pub frame: Frame,
    /// Transmissions after the first one.
    pub attempt: u32,
    pub next_deadline: Instant,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RetryAction {
    Retransmit(Frame),
    Failed(u64),
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RetryCounters {
    pub acked: u64,
    pub retransmissions: u64,
    pub failed: u64,
    pub unknown_acks: u64,
}

/// Unacknowledged frames of one publisher, keyed by sequence.
#[derive(Debug)]
pub struct RetryTable {
    qos: QosProfile,
    entries: BTreeMap<u64, RetryState>,
    pub counters: RetryCounters,
}

impl RetryTable {
    pub fn new(qos: QosProfile) -> RetryTable {
        RetryTable {
            qos,
            entries: BTreeMap::new(),
            counters: RetryCounters::default(),
        }
    }

    pub fn qos(&self) -> &QosProfile {
        &self.qos
    }

    fn deadline_after(&self, sent_at: Instant, attempt: u32) -> Instant {
        if attempt < self.qos.max_retries {
            sent_at + self.qos.ack_timeout + self.qos.backoff_delay(attempt + 1)
        } else {
            sent_at + self.qos.ack_timeout
        }
    }

    /// Records a frame that has just been transmitted for the first time.
    pub fn track(&mut self, frame: Frame, now: Instant) {
        let next_deadline = self.deadline_after(now, 0);
        self.entries.insert(
            frame.sequence,
            RetryState {
                frame,
                attempt: 0,
                next_deadline,
            },
        );
    }

    /// Clears the entry for `sequence`. Acks for unknown or already settled
    /// sequences are counted and otherwise ignored.
    pub fn handle_ack(&mut self, sequence: u64) -> bool {
        if self.entries.remove(&sequence).is_some() {
            self.counters.acked += 1;
            true
        } else {
            self.counters.unknown_acks += 1;
            false
        }
    }

    /// Advances every entry whose deadline has passed.
    pub fn poll(&mut self, now: Instant) -> Vec<RetryAction> {
        let due: Vec<u64> = self
            .entries
            .iter()
            .filter(|(_, e)| e.next_deadline <= now)
            .map(|(s, _)| *s)
            .collect();
        let mut actions = Vec::with_capacity(due.len());
        for seq in due {
            let entry = self.entries.get(&seq).expect("due entry present");
            if entry.attempt >= self.qos.max_retries {
                self.entries.remove(&seq);
                self.counters.failed += 1;
                actions.push(RetryAction::Failed(seq));
            } else {
                let attempt = entry.attempt + 1;
                let deadline = self.deadline_after(now, attempt);
                let entry = self.entries.get_mut(&seq).unwrap();
                entry.attempt = attempt;
                entry.next_deadline = deadline;
                self.counters.retransmissions += 1;
                actions.push(RetryAction::Retransmit(entry.frame.clone()));
            }
        }
        actions
    }

    /// Frames to push again right away after a reconnect. Attempts already
    /// spent are kept; the outage itself is not charged.
    pub fn resend_all(&mut self, now: Instant) -> Vec<Frame> {
        let qos = &self.qos;
        self.entries
            .values_mut()
            .map(|e| {
                e.next_deadline = if e.attempt < qos.max_retries {
                    now + qos.ack_timeout + qos.backoff_delay(e.attempt + 1)
                } else {
                    now + qos.ack_timeout
                };
                e.frame.clone()
            })
            .collect()
    }

    pub fn oldest(&self) -> Option<u64> {
        self.entries.keys().next().copied()
    }

    /// Whether `sequence` may be sent without exceeding the in-flight window.
    pub fn has_room_for(&self, sequence: u64) -> bool {
        match self.oldest() {
            None => true,
            Some(oldest) => sequence - oldest < self.qos.in_flight_window() as u64,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_deadline(&self) -> Option<Instant> {
        self.entries.values().map(|e| e.next_deadline).min()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;
    use std::time::Duration;

    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::envelope::FrameKind;

    fn frame(seq: u64) -> Frame {
        Frame::new(FrameKind::Data, "t").with_sequence(seq)
    }

    fn ms(n: u64) -> Duration {
        Duration::from_millis(n)
    }

    #[test]
    fn retransmission_timeline_follows_backoff() {
        let qos = QosProfile::reliable();
        let mut t = RetryTable::new(qos.clone());
        let t0 = Instant::now();
        t.track(frame(1), t0);
        let mut sends = Vec::new();
        let now = loop {
            let now = t.next_deadline().unwrap();
            match t.poll(now).pop().unwrap() {
                RetryAction::Retransmit(f) => {
                    assert_eq!(f, frame(1));
                    sends.push(now.duration_since(t0).as_millis());
                }
                RetryAction::Failed(seq) => {
                    assert_eq!(seq, 1);
                    break now;
                }
            }
        };
        // attempt k waits 200 ms for an ack, then backs off 50 * 2^(k-1) ms
        assert_eq!(sends, vec![250, 550, 950, 1550, 2550]);
        assert_eq!(now.duration_since(t0), qos.retry_budget());
        assert_eq!(t.counters.failed, 1);
        assert!(t.is_empty());
    }

    #[test]
    fn acks_are_idempotent_and_late_acks_ignored() {
        let mut t = RetryTable::new(QosProfile::reliable().with_retries(1));
        let t0 = Instant::now();
        t.track(frame(1), t0);
        t.track(frame(2), t0);
        assert!(t.handle_ack(1));
        assert!(!t.handle_ack(1));
        let _ = t.poll(t0 + ms(10_000));
        let _ = t.poll(t0 + ms(20_000));
        assert!(!t.handle_ack(2));
        assert_eq!(t.counters.acked, 1);
        assert_eq!(t.counters.unknown_acks, 2);
    }

    #[test]
    fn interleaved_acks_clear_exactly_matching_entries() {
        let mut t = RetryTable::new(QosProfile::reliable().with_depth(1024));
        let t0 = Instant::now();
        for s in 1..=100 {
            t.track(frame(s), t0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut acked: Vec<u64> = (1..=100).filter(|s| s % 3 != 0).collect();
        acked.shuffle(&mut rng);
        for s in &acked {
            assert!(t.handle_ack(*s));
        }
        let all: BTreeSet<u64> = (1..=100).collect();
        let expect: BTreeSet<u64> = all.difference(&acked.iter().copied().collect()).copied().collect();
        let left: BTreeSet<u64> = t.entries.keys().copied().collect();
        assert_eq!(left, expect);
    }

    #[test]
    fn window_limits_sequence_span() {
        let mut t = RetryTable::new(QosProfile::reliable().with_depth(4));
        let t0 = Instant::now();
        for s in 1..=4 {
            assert!(t.has_room_for(s));
            t.track(frame(s), t0);
        }
        assert!(!t.has_room_for(5));
        t.handle_ack(2);
        assert!(!t.has_room_for(5));
        t.handle_ack(1);
        assert!(t.has_room_for(5));
        assert!(t.has_room_for(6));
        assert!(!t.has_room_for(7));
    }

    #[test]
    fn resend_all_keeps_attempt_counts() {
        let mut t = RetryTable::new(QosProfile::reliable());
        let t0 = Instant::now();
        t.track(frame(1), t0);
        let _ = t.poll(t0 + ms(250));
        let again = t.resend_all(t0 + ms(300));
        assert_eq!(again, vec![frame(1)]);
        assert_eq!(t.entries[&1].attempt, 1);
        assert_eq!(t.entries[&1].next_deadline, t0 + ms(300 + 200 + 100));
    }
}
