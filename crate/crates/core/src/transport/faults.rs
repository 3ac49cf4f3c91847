//! Deterministic fault injection on the outgoing side of a connection.
//!
//! For every frame handed to [`FaultyConnection::send_frame`] the wrapper
//! draws, in this order, one uniform `f64` for the drop decision, one for
//! the duplicate decision, and one uniform delay in `[delay_min, delay_max]`
//! (in whole nanoseconds). All draws come from a ChaCha8 generator seeded
//! with the profile's seed, so a scenario replays identically.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envelope::Frame;

use super::{Connection, Connector, SharedConnection, TransportError};

#[derive(Debug, Clone, PartialEq)]
pub struct FaultProfile {
    pub drop_probability: f64,
    pub duplicate_probability: f64,
    pub delay_min: Duration,
    pub delay_max: Duration,
    pub seed: u64,
}

impl Default for FaultProfile {
    fn default() -> Self {
        FaultProfile {
            drop_probability: 0.0,
            duplicate_probability: 0.0,
            delay_min: Duration::ZERO,
            delay_max: Duration::ZERO,
            seed: 0,
        }
    }
}

impl FaultProfile {
    pub fn lossy(drop_probability: f64, seed: u64) -> FaultProfile {
        FaultProfile {
            drop_probability,
            seed,
            ..FaultProfile::default()
        }
    }

    pub fn with_duplicates(mut self, p: f64) -> FaultProfile {
        self.duplicate_probability = p;
        self
    }

    pub fn with_delay(mut self, min: Duration, max: Duration) -> FaultProfile {
        self.delay_min = min;
        self.delay_max = max;
        self
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.drop_probability) || !prob(self.duplicate_probability) {
            return Err(TransportError::InvalidFaultProfile("probabilities must lie in [0, 1]".into()));
        }
        if self.delay_min > self.delay_max {
            return Err(TransportError::InvalidFaultProfile("delay_min exceeds delay_max".into()));
        }
        Ok(())
    }

    fn has_delay(&self) -> bool {
        !self.delay_max.is_zero()
    }
}

/// What happens to one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultDecision {
    pub drop: bool,
    pub duplicate: bool,
    pub delay: Duration,
}

/// The seeded decision stream, usable on its own to predict a scenario.
pub struct FaultDice {
    rng: ChaCha8Rng,
    profile: FaultProfile,
}

impl FaultDice {
    pub fn new(profile: FaultProfile) -> FaultDice {
        FaultDice {
            rng: ChaCha8Rng::seed_from_u64(profile.seed),
            profile,
        }
    }

    pub fn roll(&mut self) -> FaultDecision {
        let drop_draw: f64 = self.rng.random();
        let dup_draw: f64 = self.rng.random();
        let lo = self.profile.delay_min.as_nanos() as u64;
        let hi = self.profile.delay_max.as_nanos() as u64;
        let delay = self.rng.random_range(lo..=hi);
        FaultDecision {
            drop: drop_draw < self.profile.drop_probability,
            duplicate: dup_draw < self.profile.duplicate_probability,
            delay: Duration::from_nanos(delay),
        }
    }
}

#[derive(Debug, Default)]
pub struct FaultStats {
    pub offered: AtomicU64,
    pub dropped: AtomicU64,
    pub duplicated: AtomicU64,
}

struct DelayLine {
    queue: Mutex<BinaryHeap<Reverse<(Instant, u64, OrdFrame)>>>,
    cond: Condvar,
    stopped: AtomicBool,
}

/// Heap entries are ordered by due time and insertion counter only.
struct OrdFrame(Frame);

impl PartialEq for OrdFrame {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}
impl Eq for OrdFrame {}
impl PartialOrd for OrdFrame {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdFrame {
    fn cmp(&self, _: &Self) -> std::cmp::Ordering {
        std::cmp::Ordering::Equal
    }
}

pub struct FaultyConnection {
    inner: SharedConnection,
    dice: Arc<Mutex<FaultDice>>,
    delay: Option<Arc<DelayLine>>,
    counter: AtomicU64,
    pub stats: Arc<FaultStats>,
}

/// Wraps `connection` so its outgoing frames suffer the faults in `profile`.
pub fn wrap_with_faults(connection: SharedConnection, profile: FaultProfile) -> Result<Arc<FaultyConnection>, TransportError> {
    profile.validate()?;
    let dice = Arc::new(Mutex::new(FaultDice::new(profile)));
    Ok(FaultyConnection::with_dice(connection, dice, Arc::new(FaultStats::default())))
}

impl FaultyConnection {
    fn with_dice(inner: SharedConnection, dice: Arc<Mutex<FaultDice>>, stats: Arc<FaultStats>) -> Arc<FaultyConnection> {
        let has_delay = dice.lock().profile.has_delay();
        let delay = has_delay.then(|| {
            let line = Arc::new(DelayLine {
                queue: Mutex::new(BinaryHeap::new()),
                cond: Condvar::new(),
                stopped: AtomicBool::new(false),
            });
            let worker = Arc::clone(&line);
            let target = Arc::clone(&inner);
            thread::Builder::new()
                .name("fault-delay".into())
                .spawn(move || delay_loop(worker, target))
                .expect("spawn delay thread");
            line
        });
        Arc::new(FaultyConnection {
            inner,
            dice,
            delay,
            counter: AtomicU64::new(0),
            stats,
        })
    }

    fn forward(&self, frame: Frame, due: Instant) -> Result<(), TransportError> {
        match &self.delay {
            None => self.inner.send_frame(frame),
            Some(line) => {
                let n = self.counter.fetch_add(1, Ordering::Relaxed);
                line.queue.lock().push(Reverse((due, n, OrdFrame(frame))));
                line.cond.notify_one();
                Ok(())
            }
        }
    }
}

fn delay_loop(line: Arc<DelayLine>, target: SharedConnection) {
    let mut q = line.queue.lock();
    loop {
        if line.stopped.load(Ordering::Acquire) {
            return;
        }
        let now = Instant::now();
        match q.peek() {
            Some(Reverse((due, _, _))) if *due <= now => {
                let Reverse((_, _, OrdFrame(frame))) = q.pop().unwrap();
                drop(q);
                let _ = target.send_frame(frame);
                q = line.queue.lock();
            }
            Some(Reverse((due, _, _))) => {
                let due = *due;
                line.cond.wait_until(&mut q, due);
            }
            None => {
                line.cond.wait_for(&mut q, Duration::from_millis(100));
            }
        }
    }
}

impl Connection for FaultyConnection {
    fn send_frame(&self, frame: Frame) -> Result<(), TransportError> {
        if self.inner.is_closed() {
            return Err(TransportError::Closed);
        }
        // Holding the dice across the forward keeps draw order equal to
        // send order when several threads share the connection.
        let mut dice = self.dice.lock();
        let d = dice.roll();
        self.stats.offered.fetch_add(1, Ordering::Relaxed);
        if d.drop {
            self.stats.dropped.fetch_add(1, Ordering::Relaxed);
            return Ok(());
        }
        let due = Instant::now() + d.delay;
        if d.duplicate {
            self.stats.duplicated.fetch_add(1, Ordering::Relaxed);
            self.forward(frame.clone(), due)?;
        }
        let res = self.forward(frame, due);
        drop(dice);
        res
    }

    fn recv_frame(&self, timeout: Duration) -> Result<Option<Frame>, TransportError> {
        self.inner.recv_frame(timeout)
    }

    fn close(&self) {
        if let Some(line) = &self.delay {
            line.stopped.store(true, Ordering::Release);
            line.cond.notify_all();
        }
        self.inner.close();
    }

    fn is_closed(&self) -> bool {
        self.inner.is_closed()
    }
}

impl Drop for FaultyConnection {
    fn drop(&mut self) {
        if let Some(line) = &self.delay {
            line.stopped.store(true, Ordering::Release);
            line.cond.notify_all();
        }
    }
}

/// A connector whose every connection is fault-wrapped. Reconnections keep
/// drawing from the same seeded stream.
pub struct FaultyConnector<C> {
    inner: C,
    dice: Arc<Mutex<FaultDice>>,
    pub stats: Arc<FaultStats>,
}

impl<C: Connector> FaultyConnector<C> {
    pub fn new(inner: C, profile: FaultProfile) -> Result<FaultyConnector<C>, TransportError> {
        profile.validate()?;
        Ok(FaultyConnector {
            inner,
            dice: Arc::new(Mutex::new(FaultDice::new(profile))),
            stats: Arc::new(FaultStats::default()),
        })
    }
}

impl<C: Connector> Connector for FaultyConnector<C> {
    fn connect(&self) -> Result<SharedConnection, TransportError> {
        let conn = self.inner.connect()?;
        Ok(FaultyConnection::with_dice(conn, Arc::clone(&self.dice), Arc::clone(&self.stats)))
    }

    fn describe(&self) -> String {
        format!("faulty({})", self.inner.describe())
    }
}
