//! Subscriber-side duplicate suppression and in-order release.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::time::{Duration, Instant};

use crate::envelope::Frame;

use super::DEDUP_WINDOW;

/// The last `capacity` sequence numbers seen from one publisher.
#[derive(Debug, Clone)]
pub struct DedupWindow {
    capacity: usize,
    order: VecDeque<u64>,
    seen: HashSet<u64>,
}

impl Default for DedupWindow {
    fn default() -> Self {
        DedupWindow::new(DEDUP_WINDOW)
    }
}

impl DedupWindow {
    pub fn new(capacity: usize) -> DedupWindow {
        DedupWindow {
            capacity,
            order: VecDeque::with_capacity(capacity),
            seen: HashSet::with_capacity(capacity),
        }
    }

    /// Records `seq`; false if it is already in the window.
    pub fn insert(&mut self, seq: u64) -> bool {
        if !self.seen.insert(seq) {
            return false;
        }
        self.order.push_back(seq);
        if self.order.len() > self.capacity {
            let old = self.order.pop_front().unwrap();
            self.seen.remove(&old);
        }
        true
    }

    pub fn contains(&self, seq: u64) -> bool {
        self.seen.contains(&seq)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Outcome of offering one frame to an [`InboundStream`].
#[derive(Debug, Default)]
pub struct Admission {
    /// Frames now deliverable, in order.
    pub deliver: Vec<Frame>,
    pub duplicate: bool,
    /// Arrived after its slot had been skipped.
    pub late: bool,
    /// The frame was already delivered and processed: acknowledge again.
    pub reack: bool,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct StreamCounters {
    pub delivered: u64,
    pub duplicates: u64,
    pub late: u64,
    /// Sequence numbers skipped when the hold-back buffer overflowed.
    pub gaps: u64,
}

/// Receive state for one (publisher, topic) stream.
///
/// Best-effort streams only suppress duplicates. Reliable streams also
/// release frames in sequence order, holding back early arrivals up to
/// `depth` frames; on overflow the lowest held frame is released and the
/// skipped sequence numbers are counted as a gap. A stream that has not yet
/// delivered anything (late joiner) releases its lowest held frame once it
/// has waited `start_timeout`, without counting a gap.
#[derive(Debug)]
pub struct InboundStream {
    reliable: bool,
    depth: usize,
    start_timeout: Duration,
    window: DedupWindow,
    next_expected: u64,
    held: BTreeMap<u64, Frame>,
    first_held_at: Option<Instant>,
    started: bool,
    unprocessed: HashSet<u64>,
    pub counters: StreamCounters,
}

impl InboundStream {
    pub fn best_effort() -> InboundStream {
        InboundStream::new(false, 1, Duration::ZERO)
    }

    pub fn reliable(depth: usize, start_timeout: Duration) -> InboundStream {
        InboundStream::new(true, depth.max(1), start_timeout)
    }

    fn new(reliable: bool, depth: usize, start_timeout: Duration) -> InboundStream {
        InboundStream {
            reliable,
            depth,
            start_timeout,
            window: DedupWindow::default(),
            next_expected: 1,
            held: BTreeMap::new(),
            first_held_at: None,
            started: false,
            unprocessed: HashSet::new(),
            counters: StreamCounters::default(),
        }
    }

    pub fn is_reliable(&self) -> bool {
        self.reliable
    }

    pub fn admit(&mut self, frame: Frame, now: Instant) -> Admission {
        let seq = frame.sequence;
        let mut out = Admission::default();
        if self.window.contains(seq) {
            self.counters.duplicates += 1;
            out.duplicate = true;
            out.reack = self.reliable && !self.unprocessed.contains(&seq) && !self.held.contains_key(&seq);
            return out;
        }
        if !self.reliable {
            self.window.insert(seq);
            self.counters.delivered += 1;
            out.deliver.push(frame);
            return out;
        }
        if seq < self.next_expected {
            self.window.insert(seq);
            self.counters.late += 1;
            out.late = true;
            out.reack = true;
            return out;
        }
        self.window.insert(seq);
        if self.held.is_empty() {
            self.first_held_at = Some(now);
        }
        self.held.insert(seq, frame);
        self.drain(&mut out.deliver);
        while self.held.len() > self.depth {
            self.skip_to_lowest(true);
            self.drain(&mut out.deliver);
        }
        out
    }

    /// Applies the late-joiner timeout.
    pub fn poll(&mut self, now: Instant) -> Vec<Frame> {
        let mut out = Vec::new();
        if !self.started {
            if let Some(t) = self.first_held_at {
                if now.duration_since(t) >= self.start_timeout && !self.held.is_empty() {
                    self.skip_to_lowest(false);
                    self.drain(&mut out);
                }
            }
        }
        out
    }

    fn skip_to_lowest(&mut self, count_gap: bool) {
        if let Some((&lowest, _)) = self.held.iter().next() {
            if count_gap && self.started {
                self.counters.gaps += lowest - self.next_expected;
            }
            self.next_expected = lowest;
        }
    }

    fn drain(&mut self, out: &mut Vec<Frame>) {
        while let Some(f) = self.held.remove(&self.next_expected) {
            self.unprocessed.insert(f.sequence);
            self.next_expected += 1;
            self.started = true;
            self.counters.delivered += 1;
            out.push(f);
        }
        self.first_held_at = if self.held.is_empty() { None } else { self.first_held_at };
    }

    /// Marks a delivered frame as handled by its callbacks.
    pub fn mark_processed(&mut self, seq: u64) {
        self.unprocessed.remove(&seq);
    }

    pub fn held(&self) -> usize {
        self.held.len()
    }

    /// Removes and returns every held frame without delivering it.
    pub fn take_held(&mut self) -> Vec<Frame> {
        self.first_held_at = None;
        std::mem::take(&mut self.held).into_values().collect()
    }

    /// When the oldest held frame will be force-released, if the stream
    /// has not started yet.
    pub fn start_deadline(&self) -> Option<Instant> {
        if self.started {
            return None;
        }
        self.first_held_at.map(|t| t + self.start_timeout)
    }
}
