//! Completely-fair-scheduler arithmetic and the ready queue.
//!
//! Each entity `i` has a weight `w_i` and a virtual runtime `V_i`. With
//! `W` the total weight of the ready entities, an entity picked to run gets
//! a time slice of `T_sched * w_i / W`, and after running for `R` real
//! nanoseconds its virtual runtime grows by `w_base / w_i * R`. The next
//! entity to run is always the ready one with the smallest virtual runtime.

use std::collections::{BTreeSet, HashMap};
use std::time::Duration;

use super::EntityId;

/// Slices never shrink below this, however many entities are ready.
pub const MIN_GRANULARITY: Duration = Duration::from_micros(100);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulerConfig {
    /// Target period in which every ready entity runs once.
    pub sched_period: Duration,
    /// Weight whose virtual runtime advances at wall-clock speed.
    pub base_weight: u32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            sched_period: Duration::from_millis(20),
            base_weight: 1024,
        }
    }
}

/// `T_sched * weight / total_weight`, rounded to the nearest nanosecond and
/// floored at [`MIN_GRANULARITY`].
pub fn compute_time_slice(weight: u32, config: &SchedulerConfig, total_weight: u64) -> Duration {
    let total = total_weight.max(weight as u64).max(1) as u128;
    let num = config.sched_period.as_nanos() * weight as u128;
    let slice = (num + total / 2) / total;
    Duration::from_nanos(slice as u64).max(MIN_GRANULARITY)
}

/// `vruntime + base_weight / weight * real_runtime_ns`, in integer
/// nanoseconds rounded toward zero.
pub fn account(vruntime: u64, weight: u32, config: &SchedulerConfig, real_runtime_ns: u64) -> u64 {
    let delta = (config.base_weight as u128 * real_runtime_ns as u128) / weight.max(1) as u128;
    vruntime.saturating_add(delta.min(u64::MAX as u128) as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntitySched {
    pub weight: u32,
    pub vruntime: u64,
    pub ready: bool,
}

/// Entities ordered by (vruntime, id). Ready entities live in a B-tree so
/// selection and updates are logarithmic.
#[derive(Debug, Default)]
pub struct CfsQueue {
    config: SchedulerConfig,
    entities: HashMap<EntityId, EntitySched>,
    ready: BTreeSet<(u64, EntityId)>,
    ready_weight: u64,
}

impl CfsQueue {
    pub fn new(config: SchedulerConfig) -> CfsQueue {
        CfsQueue {
            config,
            ..CfsQueue::default()
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn insert(&mut self, id: EntityId, weight: u32) {
        self.entities.entry(id).or_insert(EntitySched {
            weight: weight.max(1),
            vruntime: 0,
            ready: false,
        });
    }

    pub fn remove(&mut self, id: EntityId) {
        self.set_ready(id, false);
        self.entities.remove(&id);
    }

    pub fn get(&self, id: EntityId) -> Option<&EntitySched> {
        self.entities.get(&id)
    }

    pub fn min_ready_vruntime(&self) -> Option<u64> {
        self.ready.iter().next().map(|(v, _)| *v)
    }

    /// Marks an entity ready or idle. An entity becoming ready never starts
    /// behind the current ready minimum, so it cannot monopolize the
    /// executor after sitting idle.
    pub fn set_ready(&mut self, id: EntityId, ready: bool) {
        let min = self.min_ready_vruntime();
        let Some(e) = self.entities.get_mut(&id) else {
            return;
        };
        if e.ready == ready {
            return;
        }
        if ready {
            e.vruntime = e.vruntime.max(min.unwrap_or(0));
            self.ready.insert((e.vruntime, id));
            self.ready_weight += e.weight as u64;
        } else {
            self.ready.remove(&(e.vruntime, id));
            self.ready_weight -= e.weight as u64;
        }
        e.ready = ready;
    }

    /// Ready entity with the least virtual runtime, lowest id on ties.
    pub fn pick_next(&self) -> Option<EntityId> {
        self.ready.iter().next().map(|(_, id)| *id)
    }

    pub fn ready_weight(&self) -> u64 {
        self.ready_weight
    }

    pub fn ready_count(&self) -> usize {
        self.ready.len()
    }

    pub fn time_slice(&self, id: EntityId) -> Duration {
        let w = self.entities.get(&id).map_or(1, |e| e.weight);
        compute_time_slice(w, &self.config, self.ready_weight.max(w as u64))
    }

    /// Charges `real_runtime_ns` of execution to `id`.
    pub fn account(&mut self, id: EntityId, real_runtime_ns: u64) {
        let config = self.config;
        let Some(e) = self.entities.get_mut(&id) else {
            return;
        };
        let next = account(e.vruntime, e.weight, &config, real_runtime_ns);
        if e.ready {
            self.ready.remove(&(e.vruntime, id));
            self.ready.insert((next, id));
        }
        e.vruntime = next;
    }

    pub fn ready_vruntimes(&self) -> impl Iterator<Item = (EntityId, u64)> + '_ {
        self.ready.iter().map(|(v, id)| (*id, *v))
    }
}
