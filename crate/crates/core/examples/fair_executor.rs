//! Weighted fair sharing of one executor thread among busy entities.

use std::time::{Duration, Instant};

use metaros::executor::{BusyEntity, CfsExecutor, Executor, SchedulerConfig, Schedulable};

fn main() {
    let mut exec = CfsExecutor::new(SchedulerConfig::default());
    let work = |label: &str, weight| {
        BusyEntity::new(label, weight, || {
            let t = Instant::now();
            while t.elapsed() < Duration::from_micros(200) {
                std::hint::spin_loop();
            }
            Ok(())
        })
    };
    let entities = [work("light_a", 1024), work("light_b", 1024), work("heavy", 2048)];
    for e in &entities {
        exec.add_entity(e.clone());
    }
    let start = Instant::now();
    while start.elapsed() < Duration::from_secs(2) {
        exec.spin_once(Duration::ZERO);
    }
    let stats = exec.stats();
    for e in &entities {
        println!("{:8} share {:5.1}%", e.label(), stats.share(e.id()) * 100.0);
    }
}
