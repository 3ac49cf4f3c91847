use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Serialize;

use super::cfs::{CfsQueue, SchedulerConfig};
use super::clock::{Clock, MonotonicClock};
use super::entity::{EntityId, EntityRegistry, Schedulable, Wakeup};

/// Longest a spin loop sleeps before re-checking its stop condition.
const IDLE_POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EntityStats {
    pub id: u64,
    pub label: String,
    pub weight: u32,
    /// Cumulative measured execution time in nanoseconds.
    pub runtime_ns: u64,
    pub picks: u64,
    pub items: u64,
    pub errors: u64,
    pub vruntime_ns: u64,
}

/// One scheduling decision, recorded when tracing is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PickRecord {
    pub entity: EntityId,
    pub vruntime: u64,
    /// Smallest vruntime among the other ready entities.
    pub others_min: Option<u64>,
    pub slice_ns: u64,
    pub ran_ns: u64,
}

#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub entities: Vec<EntityStats>,
    pub busy_ns: u64,
    pub trace: Vec<PickRecord>,
}

impl RunStats {
    pub fn entity(&self, id: EntityId) -> Option<&EntityStats> {
        self.entities.iter().find(|e| e.id == id.0)
    }

    /// Fraction of all measured execution time spent in `id`.
    pub fn share(&self, id: EntityId) -> f64 {
        let total: u64 = self.entities.iter().map(|e| e.runtime_ns).sum();
        match (self.entity(id), total) {
            (Some(e), t) if t > 0 => e.runtime_ns as f64 / t as f64,
            _ => 0.0,
        }
    }
}

/// The swappable executor contract.
pub trait Executor: Send {
    /// Schedules every entity of a registry, including ones added later.
    fn add_registry(&mut self, registry: Arc<EntityRegistry>);

    /// Schedules a standalone entity.
    fn add_entity(&mut self, entity: Arc<dyn Schedulable>);

    /// Runs one scheduling round, waiting up to `max_wait` if nothing is
    /// ready. Returns the number of work items executed.
    fn spin_once(&mut self, max_wait: Duration) -> usize;

    fn stats(&self) -> RunStats;

    /// Wakes a spin loop sleeping in [`Executor::spin_once`].
    fn wakeup(&self) -> Arc<Wakeup>;

    /// Attaches every entity of `node`, including ones it creates later.
    fn add_node(&mut self, node: &crate::nodegraph::Node) {
        self.add_registry(node.registry());
    }

    fn spin_until(&mut self, stop: &mut dyn FnMut() -> bool) {
        while !stop() {
            self.spin_once(IDLE_POLL);
        }
    }

    fn spin_for(&mut self, duration: Duration) {
        let end = std::time::Instant::now() + duration;
        loop {
            let now = std::time::Instant::now();
            if now >= end {
                break;
            }
            self.spin_once((end - now).min(IDLE_POLL));
        }
    }
}

fn run_guarded(entity: &dyn Schedulable) -> Result<bool, String> {
    match catch_unwind(AssertUnwindSafe(|| entity.run_one())) {
        Ok(r) => r,
        Err(panic) => Err(panic_message(panic)),
    }
}

pub(crate) fn panic_message(panic: Box<dyn std::any::Any + Send>) -> String {
    panic
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| panic.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "callback panicked".into())
}

/// Entity bookkeeping shared by both executors.
struct Attached {
    local: Arc<EntityRegistry>,
    sources: Vec<(Arc<EntityRegistry>, u64)>,
    entities: BTreeMap<EntityId, Arc<dyn Schedulable>>,
    stats: BTreeMap<EntityId, EntityStats>,
    wakeup: Arc<Wakeup>,
}

impl Attached {
    fn new() -> Attached {
        let local = EntityRegistry::new();
        let wakeup = Wakeup::new();
        local.notifier().bind(wakeup.clone());
        Attached {
            sources: vec![(local.clone(), u64::MAX)],
            local,
            entities: BTreeMap::new(),
            stats: BTreeMap::new(),
            wakeup,
        }
    }

    fn add_registry(&mut self, registry: Arc<EntityRegistry>) {
        registry.notifier().bind(self.wakeup.clone());
        self.sources.push((registry, u64::MAX));
    }

    /// Syncs the entity map with the registries. Returns (added, removed).
    fn refresh(&mut self) -> Option<(Vec<EntityId>, Vec<EntityId>)> {
        let stale = self.sources.iter().any(|(r, g)| r.generation() != *g);
        if !stale {
            return None;
        }
        let mut current = BTreeMap::new();
        for (reg, gen) in &mut self.sources {
            *gen = reg.generation();
            for e in reg.snapshot() {
                current.insert(e.id(), e);
            }
        }
        let added: Vec<EntityId> = current
            .keys()
            .filter(|id| !self.entities.contains_key(id))
            .copied()
            .collect();
        let removed: Vec<EntityId> = self
            .entities
            .keys()
            .filter(|id| !current.contains_key(id))
            .copied()
            .collect();
        for id in &added {
            let e = &current[id];
            self.stats.entry(*id).or_insert_with(|| EntityStats {
                id: id.0,
                label: e.label(),
                weight: e.weight(),
                ..EntityStats::default()
            });
        }
        self.entities = current;
        Some((added, removed))
    }

    fn run_stats(&self) -> RunStats {
        RunStats {
            entities: self.stats.values().cloned().collect(),
            busy_ns: self.stats.values().map(|s| s.runtime_ns).sum(),
            trace: Vec::new(),
        }
    }
}

/// Weighted fair executor: always runs the ready entity with the least
/// virtual runtime for up to its time slice.
pub struct CfsExecutor {
    queue: CfsQueue,
    clock: Arc<dyn Clock>,
    attached: Attached,
    trace: Option<Vec<PickRecord>>,
}

impl Default for CfsExecutor {
    fn default() -> Self {
        CfsExecutor::new(SchedulerConfig::default())
    }
}

impl CfsExecutor {
    pub fn new(config: SchedulerConfig) -> CfsExecutor {
        CfsExecutor::with_clock(config, Arc::new(MonotonicClock::new()))
    }

    pub fn with_clock(config: SchedulerConfig, clock: Arc<dyn Clock>) -> CfsExecutor {
        CfsExecutor {
            queue: CfsQueue::new(config),
            clock,
            attached: Attached::new(),
            trace: None,
        }
    }

    /// Records every pick for later inspection through [`RunStats::trace`].
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn config(&self) -> &SchedulerConfig {
        self.queue.config()
    }

    pub fn vruntime(&self, id: EntityId) -> Option<u64> {
        self.queue.get(id).map(|e| e.vruntime)
    }

    fn update_readiness(&mut self) {
        if let Some((added, removed)) = self.attached.refresh() {
            for id in removed {
                self.queue.remove(id);
            }
            for id in added {
                let w = self.attached.entities[&id].weight();
                self.queue.insert(id, w);
            }
        }
        for (id, e) in &self.attached.entities {
            self.queue.set_ready(*id, e.has_work());
        }
    }
}

impl Executor for CfsExecutor {
    fn add_registry(&mut self, registry: Arc<EntityRegistry>) {
        self.attached.add_registry(registry);
    }

    fn add_entity(&mut self, entity: Arc<dyn Schedulable>) {
        self.attached.local.add(entity);
    }

    fn spin_once(&mut self, max_wait: Duration) -> usize {
        self.update_readiness();
        let Some(id) = self.queue.pick_next() else {
            self.attached.wakeup.wait(max_wait);
            return 0;
        };
        let entity = self.attached.entities[&id].clone();
        let slice = self.queue.time_slice(id);
        let vruntime = self.queue.get(id).map_or(0, |e| e.vruntime);
        let others_min = self.trace.as_ref().and_then(|_| {
            self.queue
                .ready_vruntimes()
                .filter(|(other, _)| *other != id)
                .map(|(_, v)| v)
                .min()
        });

        let start = self.clock.now_ns();
        let slice_ns = slice.as_nanos() as u64;
        let mut items = 0usize;
        let mut errors = 0u64;
        loop {
            match run_guarded(entity.as_ref()) {
                Ok(true) => items += 1,
                Ok(false) => break,
                Err(msg) => {
                    items += 1;
                    errors += 1;
                    log::warn!("callback in {} failed: {}", entity.label(), msg);
                }
            }
            if self.clock.now_ns().saturating_sub(start) >= slice_ns || !entity.has_work() {
                break;
            }
        }
        let ran = self.clock.now_ns().saturating_sub(start);
        self.queue.account(id, ran);

        let stats = self.attached.stats.get_mut(&id).expect("stats for attached entity");
        stats.runtime_ns += ran;
        stats.picks += 1;
        stats.items += items as u64;
        stats.errors += errors;
        stats.vruntime_ns = self.queue.get(id).map_or(0, |e| e.vruntime);
        if let Some(trace) = &mut self.trace {
            trace.push(PickRecord {
                entity: id,
                vruntime,
                others_min,
                slice_ns,
                ran_ns: ran,
            });
        }
        items
    }

    fn stats(&self) -> RunStats {
        let mut s = self.attached.run_stats();
        s.trace = self.trace.clone().unwrap_or_default();
        s
    }

    fn wakeup(&self) -> Arc<Wakeup> {
        self.attached.wakeup.clone()
    }
}

/// Round-robin executor: each round runs one item from every entity with
/// work, in registration order. No fairness guarantee beyond that.
pub struct FifoExecutor {
    clock: Arc<dyn Clock>,
    attached: Attached,
}

impl Default for FifoExecutor {
    fn default() -> Self {
        FifoExecutor::new()
    }
}

impl FifoExecutor {
    pub fn new() -> FifoExecutor {
        FifoExecutor {
            clock: Arc::new(MonotonicClock::new()),
            attached: Attached::new(),
        }
    }
}

impl Executor for FifoExecutor {
    fn add_registry(&mut self, registry: Arc<EntityRegistry>) {
        self.attached.add_registry(registry);
    }

    fn add_entity(&mut self, entity: Arc<dyn Schedulable>) {
        self.attached.local.add(entity);
    }

    fn spin_once(&mut self, max_wait: Duration) -> usize {
        self.attached.refresh();
        let ready: Vec<_> = self
            .attached
            .entities
            .values()
            .filter(|e| e.has_work())
            .cloned()
            .collect();
        if ready.is_empty() {
            self.attached.wakeup.wait(max_wait);
            return 0;
        }
        let mut items = 0;
        for e in ready {
            let start = self.clock.now_ns();
            let r = run_guarded(e.as_ref());
            let ran = self.clock.now_ns().saturating_sub(start);
            let stats = self.attached.stats.get_mut(&e.id()).expect("stats for attached entity");
            stats.runtime_ns += ran;
            stats.picks += 1;
            match r {
                Ok(true) => {
                    stats.items += 1;
                    items += 1;
                }
                Ok(false) => {}
                Err(msg) => {
                    stats.items += 1;
                    stats.errors += 1;
                    items += 1;
                    log::warn!("callback in {} failed: {}", e.label(), msg);
                }
            }
        }
        items
    }

    fn stats(&self) -> RunStats {
        self.attached.run_stats()
    }

    fn wakeup(&self) -> Arc<Wakeup> {
        self.attached.wakeup.clone()
    }
}

/// An executor spinning on a background thread.
pub struct SpinHandle<E> {
    stop: Arc<AtomicBool>,
    wakeup: Arc<Wakeup>,
    thread: Option<JoinHandle<E>>,
}

/// Moves `executor` onto a new thread that spins until stopped.
pub fn spawn<E: Executor + 'static>(mut executor: E) -> SpinHandle<E> {
    let stop = Arc::new(AtomicBool::new(false));
    let wakeup = executor.wakeup();
    let flag = stop.clone();
    let thread = std::thread::Builder::new()
        .name("executor".into())
        .spawn(move || {
            executor.spin_until(&mut || flag.load(Ordering::Acquire));
            executor
        })
        .expect("spawn executor thread");
    SpinHandle {
        stop,
        wakeup,
        thread: Some(thread),
    }
}

impl<E> SpinHandle<E> {
    /// Stops the loop and returns the executor with its statistics.
    pub fn stop(mut self) -> E {
        self.halt().expect("executor thread present")
    }

    fn halt(&mut self) -> Option<E> {
        self.stop.store(true, Ordering::Release);
        self.wakeup.notify();
        self.thread.take().and_then(|t| t.join().ok())
    }
}

impl<E> Drop for SpinHandle<E> {
    fn drop(&mut self) {
        let _ = self.halt();
    }
}
