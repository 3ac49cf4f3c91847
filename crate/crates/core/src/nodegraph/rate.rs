use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::executor::{EntityId, Notifier, Schedulable};

use super::node::{Node, NodeInner};
use super::NodeError;

/// Index of the deadline to wait for next, given the index `cycle` of the
/// last deadline reached and the time elapsed since the epoch.
///
/// Normally this is `cycle + 1`. If that deadline was overrun by a full
/// period or more, the missed deadlines are skipped and the first deadline
/// still in the future is returned instead.
pub fn next_deadline_index(cycle: u64, elapsed: Duration, period: Duration) -> u64 {
    let p = period.as_nanos();
    let e = elapsed.as_nanos();
    let k = cycle + 1;
    if e >= (k as u128 + 1) * p {
        (e / p) as u64 + 1
    } else {
        k
    }
}

/// Fixed-cadence loop pacing. Deadline `k` is always `epoch + k * period`,
/// so waking late never shifts later deadlines.
#[derive(Debug, Clone)]
pub struct RateController {
    period: Duration,
    epoch: Instant,
    cycle: u64,
    skipped: u64,
}

impl RateController {
    pub fn new(period: Duration) -> Result<RateController, NodeError> {
        RateController::with_epoch(period, Instant::now())
    }

    pub fn from_hz(hz: f64) -> Result<RateController, NodeError> {
        if !(hz.is_finite() && hz > 0.0) {
            return Err(NodeError::ZeroPeriod);
        }
        RateController::new(Duration::from_secs_f64(1.0 / hz))
    }

    pub fn with_epoch(period: Duration, epoch: Instant) -> Result<RateController, NodeError> {
        if period.is_zero() {
            return Err(NodeError::ZeroPeriod);
        }
        Ok(RateController {
            period,
            epoch,
            cycle: 0,
            skipped: 0,
        })
    }

    pub fn period(&self) -> Duration {
        self.period
    }

    pub fn epoch(&self) -> Instant {
        self.epoch
    }

    /// Index of the last deadline reached.
    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    /// Deadlines skipped because of overruns.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn deadline(&self, k: u64) -> Instant {
        self.epoch + Duration::from_nanos((self.period.as_nanos() * k as u128) as u64)
    }

    /// Advances to the next deadline as seen at `now` and returns it
    /// without sleeping.
    pub fn advance(&mut self, now: Instant) -> Instant {
        let k = next_deadline_index(self.cycle, now.saturating_duration_since(self.epoch), self.period);
        self.skipped += k - self.cycle - 1;
        self.cycle = k;
        self.deadline(k)
    }

    /// Sleeps until the next deadline and returns it. A deadline overrun by
    /// less than a period returns immediately.
    pub fn sleep(&mut self) -> Instant {
        let deadline = self.advance(Instant::now());
        let now = Instant::now();
        if deadline > now {
            std::thread::sleep(deadline - now);
        }
        deadline
    }
}

pub(crate) struct TimerInner {
    entity: EntityId,
    rate: Mutex<RateController>,
    next: Mutex<Instant>,
    pending: AtomicBool,
    canceled: AtomicBool,
    fires: AtomicU64,
    callback: Mutex<Box<dyn FnMut() + Send>>,
    notifier: Arc<Notifier>,
}

impl Schedulable for TimerInner {
    fn id(&self) -> EntityId {
        self.entity
    }

    fn label(&self) -> String {
        format!("timer:{:?}", self.rate.lock().period())
    }

    fn has_work(&self) -> bool {
        self.pending.load(Ordering::Acquire) && !self.canceled.load(Ordering::Acquire)
    }

    fn run_one(&self) -> Result<bool, String> {
        if !self.pending.swap(false, Ordering::AcqRel) || self.canceled.load(Ordering::Acquire) {
            return Ok(false);
        }
        self.fires.fetch_add(1, Ordering::Relaxed);
        (self.callback.lock())();
        Ok(true)
    }
}

/// Periodic callback on the node's executor. Missed deadlines are skipped,
/// never bunched. Dropping the handle cancels the timer.
pub struct Timer {
    inner: Arc<TimerInner>,
    node: Weak<NodeInner>,
}

impl Timer {
    pub fn period(&self) -> Duration {
        self.inner.rate.lock().period()
    }

    /// Callback invocations so far.
    pub fn fires(&self) -> u64 {
        self.inner.fires.load(Ordering::Relaxed)
    }

    pub fn skipped(&self) -> u64 {
        self.inner.rate.lock().skipped()
    }

    pub fn cancel(&self) {
        self.inner.canceled.store(true, Ordering::Release);
        if let Some(node) = self.node.upgrade() {
            node.timers.lock().retain(|t| !Arc::ptr_eq(t, &self.inner));
            node.registry.remove(self.inner.entity);
        }
    }
}

impl Drop for Timer {
    fn drop(&mut self) {
        self.cancel();
    }
}

impl Node {
    pub fn create_timer(&self, period: Duration, callback: impl FnMut() + Send + 'static) -> Result<Timer, NodeError> {
        let rate = RateController::new(period)?;
        let first = rate.deadline(1);
        let inner = Arc::new(TimerInner {
            entity: EntityId::next(),
            rate: Mutex::new(rate),
            next: Mutex::new(first),
            pending: AtomicBool::new(false),
            canceled: AtomicBool::new(false),
            fires: AtomicU64::new(0),
            callback: Mutex::new(Box::new(callback)),
            notifier: self.inner.registry.notifier(),
        });
        self.inner.timers.lock().push(inner.clone());
        self.inner.registry.add(inner.clone());
        self.inner.wake_housekeeping();
        Ok(Timer {
            inner,
            node: Arc::downgrade(&self.inner),
        })
    }
}

impl NodeInner {
    pub(crate) fn poll_timers(&self, now: Instant) -> Option<Instant> {
        let timers: Vec<_> = self.timers.lock().clone();
        let mut next: Option<Instant> = None;
        for t in timers {
            let mut due = t.next.lock();
            if now >= *due {
                t.pending.store(true, Ordering::Release);
                t.notifier.notify();
                *due = t.rate.lock().advance(now);
            }
            next = Some(next.map_or(*due, |n| n.min(*due)));
        }
        next
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ms(n: u64) -> Duration {
        Duration::from_millis(n)
    }

    #[test]
    fn nominal_cadence() {
        let t0 = Instant::now();
        let mut r = RateController::with_epoch(ms(100), t0).unwrap();
        // 20 ms of work per cycle never overruns
        for k in 1..=5u64 {
            let now = r.deadline(r.cycle()) + ms(20);
            assert_eq!(r.advance(now), t0 + ms(100 * k));
        }
        assert_eq!(r.skipped(), 0);
    }

    #[test]
    fn long_overrun_skips_to_next_future_deadline() {
        let t0 = Instant::now();
        let mut r = RateController::with_epoch(ms(100), t0).unwrap();
        assert_eq!(r.advance(t0 + ms(250)), t0 + ms(300));
        assert_eq!(r.cycle(), 3);
        assert_eq!(r.skipped(), 2);
    }

    #[test]
    fn short_overrun_returns_passed_deadline() {
        let t0 = Instant::now();
        let mut r = RateController::with_epoch(ms(100), t0).unwrap();
        assert_eq!(r.advance(t0 + ms(150)), t0 + ms(100));
        assert_eq!(r.advance(t0 + ms(160)), t0 + ms(200));
        assert_eq!(r.skipped(), 0);
    }

    #[test]
    fn zero_period_rejected() {
        assert!(RateController::new(Duration::ZERO).is_err());
        assert!(RateController::from_hz(0.0).is_err());
    }

    proptest! {
        #[test]
        fn deadlines_are_exact_multiples(period_us in 1u64..1_000_000, ks in proptest::collection::vec(0u64..1_000_000, 1..50)) {
            let t0 = Instant::now();
            let r = RateController::with_epoch(Duration::from_micros(period_us), t0).unwrap();
            for k in ks {
                prop_assert_eq!(r.deadline(k) - t0, Duration::from_micros(period_us * k));
            }
        }

        #[test]
        fn next_index_is_first_useful_deadline(cycle in 0u64..1000, elapsed_ms in 0u64..200_000, period_ms in 1u64..1000) {
            let k = next_deadline_index(cycle, ms(elapsed_ms), ms(period_ms));
            prop_assert!(k > cycle);
            if k > cycle + 1 {
                // skipped: k is the first deadline strictly after now
                prop_assert!(k * period_ms > elapsed_ms);
                prop_assert!((k - 1) * period_ms <= elapsed_ms);
            } else {
                prop_assert!(elapsed_ms < (cycle + 2) * period_ms);
            }
        }
    }
}
