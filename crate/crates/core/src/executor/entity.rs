use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex, RwLock};

/// Process-unique scheduling entity id. Lower ids win vruntime ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub u64);

static NEXT_ENTITY: AtomicU64 = AtomicU64::new(1);

impl EntityId {
    pub fn next() -> EntityId {
        EntityId(NEXT_ENTITY.fetch_add(1, Ordering::Relaxed))
    }
}

impl std::fmt::Display for EntityId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "e{}", self.0)
    }
}

/// Weight of an entity whose virtual runtime tracks real time under the
/// default configuration.
pub const DEFAULT_WEIGHT: u32 = 1024;

/// A unit of schedulable work: a subscription, timer, service or action
/// endpoint, or any synthetic workload.
pub trait Schedulable: Send + Sync {
    fn id(&self) -> EntityId;

    fn label(&self) -> String;

    fn weight(&self) -> u32 {
        DEFAULT_WEIGHT
    }

    fn has_work(&self) -> bool;

    /// Runs one queued item. `Ok(false)` means the queue was empty.
    fn run_one(&self) -> Result<bool, String>;
}

/// Binary semaphore the executor sleeps on while idle.
#[derive(Debug, Default)]
pub struct Wakeup {
    flag: Mutex<bool>,
    cond: Condvar,
}

impl Wakeup {
    pub fn new() -> Arc<Wakeup> {
        Arc::new(Wakeup::default())
    }

    pub fn notify(&self) {
        let mut f = self.flag.lock();
        if !*f {
            *f = true;
            self.cond.notify_one();
        }
    }

    /// Waits up to `timeout` for a notification; true if one arrived.
    pub fn wait(&self, timeout: Duration) -> bool {
        let mut f = self.flag.lock();
        if !*f {
            self.cond.wait_for(&mut f, timeout);
        }
        std::mem::replace(&mut *f, false)
    }
}

/// Handle entities use to wake whichever executor currently owns them.
#[derive(Debug, Default)]
pub struct Notifier {
    target: RwLock<Option<Arc<Wakeup>>>,
}

impl Notifier {
    pub fn notify(&self) {
        if let Some(w) = self.target.read().as_ref() {
            w.notify();
        }
    }

    pub fn bind(&self, wakeup: Arc<Wakeup>) {
        *self.target.write() = Some(wakeup);
    }
}

/// The set of entities one node hands to an executor. Entities may be
/// added or removed while an executor is spinning.
#[derive(Default)]
pub struct EntityRegistry {
    entities: RwLock<Vec<Arc<dyn Schedulable>>>,
    generation: AtomicU64,
    notifier: Arc<Notifier>,
}

impl EntityRegistry {
    pub fn new() -> Arc<EntityRegistry> {
        Arc::new(EntityRegistry::default())
    }

    pub fn add(&self, entity: Arc<dyn Schedulable>) {
        self.entities.write().push(entity);
        self.generation.fetch_add(1, Ordering::Release);
        self.notifier.notify();
    }

    pub fn remove(&self, id: EntityId) {
        self.entities.write().retain(|e| e.id() != id);
        self.generation.fetch_add(1, Ordering::Release);
        self.notifier.notify();
    }

    pub fn generation(&self) -> u64 {
        self.generation.load(Ordering::Acquire)
    }

    pub fn snapshot(&self) -> Vec<Arc<dyn Schedulable>> {
        self.entities.read().clone()
    }

    pub fn len(&self) -> usize {
        self.entities.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn notifier(&self) -> Arc<Notifier> {
        self.notifier.clone()
    }
}

type Job = Box<dyn FnOnce() -> Result<(), String> + Send>;

/// FIFO of one-shot closures run as a single entity.
pub struct JobQueue {
    id: EntityId,
    label: String,
    weight: u32,
    jobs: Mutex<VecDeque<Job>>,
    notifier: Arc<Notifier>,
}

impl JobQueue {
    pub fn new(label: impl Into<String>, weight: u32, notifier: Arc<Notifier>) -> Arc<JobQueue> {
        Arc::new(JobQueue {
            id: EntityId::next(),
            label: label.into(),
            weight: weight.max(1),
            jobs: Mutex::new(VecDeque::new()),
            notifier,
        })
    }

    pub fn push(&self, job: impl FnOnce() -> Result<(), String> + Send + 'static) {
        self.jobs.lock().push_back(Box::new(job));
        self.notifier.notify();
    }

    pub fn len(&self) -> usize {
        self.jobs.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Schedulable for JobQueue {
    fn id(&self) -> EntityId {
        self.id
    }

    fn label(&self) -> String {
        self.label.clone()
    }

    fn weight(&self) -> u32 {
        self.weight
    }

    fn has_work(&self) -> bool {
        !self.jobs.lock().is_empty()
    }

    fn run_one(&self) -> Result<bool, String> {
        let job = self.jobs.lock().pop_front();
        match job {
            Some(job) => job().map(|_| true),
            None => Ok(false),
        }
    }
}

/// An entity that always has work: each item calls `body` once.
pub struct BusyEntity {
    id: EntityId,
    label: String,
    weight: u32,
    body: Mutex<Box<dyn FnMut() -> Result<(), String> + Send>>,
}

impl BusyEntity {
    pub fn new(
        label: impl Into<String>,
        weight: u32,
        body: impl FnMut() -> Result<(), String> + Send + 'static,
    ) -> Arc<BusyEntity> {
        Arc::new(BusyEntity {
            id: EntityId::next(),
            label: label.into(),
            weight: weight.max(1),
            body: Mutex::new(Box::new(body)),
        })
    }
}

impl Schedulable for BusyEntity {
    fn id(&self) -> EntityId {
        self.id
    }

    fn label(&self) -> String {
        self.label.clone()
    }

    fn weight(&self) -> u32 {
        self.weight
    }

    fn has_work(&self) -> bool {
        true
    }

    fn run_one(&self) -> Result<bool, String> {
        (self.body.lock())().map(|_| true)
    }
}
