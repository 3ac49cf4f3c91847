//! Executors that run node callbacks. [`CfsExecutor`] shares CPU time among
//! entities in proportion to their weights; [`FifoExecutor`] is the minimal
//! round-robin alternative behind the same [`Executor`] trait.

mod cfs;
mod clock;
mod entity;
mod spin;

pub use cfs::{account, compute_time_slice, CfsQueue, EntitySched, SchedulerConfig, MIN_GRANULARITY};
pub use clock::{Clock, ManualClock, MonotonicClock};
pub use entity::{
    BusyEntity, EntityId, EntityRegistry, JobQueue, Notifier, Schedulable, Wakeup, DEFAULT_WEIGHT,
};
pub(crate) use spin::panic_message;
pub use spin::{spawn, CfsExecutor, EntityStats, Executor, FifoExecutor, PickRecord, RunStats, SpinHandle};

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicU64, Ordering};
    use std::sync::Arc;
    use std::time::Duration;

    use super::*;

    fn costed(clock: &Arc<ManualClock>, label: &str, weight: u32, cost: Duration) -> Arc<BusyEntity> {
        let c = clock.clone();
        BusyEntity::new(label, weight, move || {
            c.advance(cost);
            Ok(())
        })
    }

    #[test]
    fn simulated_shares_follow_weights() {
        let clock = ManualClock::new();
        let mut ex = CfsExecutor::with_clock(SchedulerConfig::default(), clock.clone());
        ex.enable_trace();
        let cost = Duration::from_micros(700);
        let ents = [
            costed(&clock, "a", 1024, cost),
            costed(&clock, "b", 1024, cost),
            costed(&clock, "c", 2048, cost),
        ];
        for e in &ents {
            ex.add_entity(e.clone());
        }
        while clock.now_ns() < 10_000_000_000 {
            ex.spin_once(Duration::ZERO);
        }
        let stats = ex.stats();
        let shares: Vec<f64> = ents.iter().map(|e| stats.share(e.id())).collect();
        for (s, want) in shares.iter().zip([0.25, 0.25, 0.5]) {
            assert!((s - want).abs() < 0.01, "shares {shares:?}");
        }
        for p in &stats.trace {
            assert!(p.others_min.is_none_or(|m| p.vruntime <= m));
        }
    }

    #[test]
    fn newcomer_joins_at_current_minimum() {
        let clock = ManualClock::new();
        let mut ex = CfsExecutor::with_clock(SchedulerConfig::default(), clock.clone());
        let a = costed(&clock, "a", 1024, Duration::from_millis(1));
        ex.add_entity(a.clone());
        for _ in 0..10 {
            ex.spin_once(Duration::ZERO);
        }
        let min = ex.vruntime(a.id()).unwrap();
        assert!(min > 0);
        let b = costed(&clock, "b", 1024, Duration::from_millis(1));
        ex.add_entity(b.clone());
        ex.spin_once(Duration::ZERO);
        let first = ex.stats().entity(b.id()).map(|s| s.picks).unwrap_or(0);
        // b either ran from `min` or is waiting at `min`
        let vb = ex.vruntime(b.id()).unwrap();
        assert!(vb >= min);
        if first == 0 {
            assert_eq!(vb, min);
        }
    }

    #[test]
    fn failing_entity_is_isolated() {
        let run = |with_failing: bool| {
            let clock = ManualClock::new();
            let mut ex = CfsExecutor::with_clock(SchedulerConfig::default(), clock.clone());
            let good = costed(&clock, "good", 1024, Duration::from_micros(500));
            ex.add_entity(good.clone());
            let filler: Arc<dyn Schedulable> = if with_failing {
                let c = clock.clone();
                BusyEntity::new("bad", 1024, move || {
                    c.advance(Duration::from_micros(500));
                    panic!("boom")
                })
            } else {
                costed(&clock, "other", 1024, Duration::from_micros(500))
            };
            ex.add_entity(filler.clone());
            while clock.now_ns() < 2_000_000_000 {
                ex.spin_once(Duration::ZERO);
            }
            let s = ex.stats();
            (s.entity(good.id()).unwrap().items, s.entity(filler.id()).unwrap().errors)
        };
        let quiet = std::panic::take_hook();
        std::panic::set_hook(Box::new(|_| {}));
        let (base, _) = run(false);
        let (with_bad, errors) = run(true);
        std::panic::set_hook(quiet);
        assert!(errors > 0);
        let ratio = with_bad as f64 / base as f64;
        assert!((0.9..=1.1).contains(&ratio), "{with_bad} vs {base}");
    }

    #[test]
    fn fifo_runs_queued_jobs_in_order() {
        let mut ex = FifoExecutor::new();
        let reg = EntityRegistry::new();
        ex.add_registry(reg.clone());
        let q = JobQueue::new("jobs", 1, reg.notifier());
        reg.add(q.clone());
        let log = Arc::new(parking_lot::Mutex::new(Vec::new()));
        for i in 0..5 {
            let l = log.clone();
            q.push(move || {
                l.lock().push(i);
                Ok(())
            });
        }
        while ex.spin_once(Duration::ZERO) > 0 {}
        assert_eq!(*log.lock(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn spawned_executor_wakes_on_enqueue() {
        let reg = EntityRegistry::new();
        let q = JobQueue::new("jobs", 1, reg.notifier());
        reg.add(q.clone());
        let mut ex = CfsExecutor::default();
        ex.add_registry(reg.clone());
        let handle = spawn(ex);
        let hits = Arc::new(AtomicU64::new(0));
        let h = hits.clone();
        q.push(move || {
            h.fetch_add(1, Ordering::SeqCst);
            Ok(())
        });
        let deadline = std::time::Instant::now() + Duration::from_secs(2);
        while hits.load(Ordering::SeqCst) == 0 && std::time::Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(1));
        }
        let ex = handle.stop();
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        assert_eq!(ex.stats().entity(q.id()).unwrap().items, 1);
    }
}
