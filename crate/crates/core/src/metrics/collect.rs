use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::{compute_cpu, compute_latency, CpuReport, LatencySample, MetricsError};

pub const CPU_SAMPLE_PERIOD: Duration = Duration::from_millis(100);

/// Append-only latency log shared between receiving threads.
#[derive(Debug, Clone, Default)]
pub struct LatencyCollector {
    samples: Arc<Mutex<Vec<LatencySample>>>,
    anomalies: Arc<Mutex<u64>>,
}

impl LatencyCollector {
    pub fn new() -> LatencyCollector {
        LatencyCollector::default()
    }

    /// Records one measurement. Receive times before the send time are
    /// counted as clock anomalies and not stored.
    pub fn record(&self, t_send: u64, t_receive: u64) -> Result<LatencySample, MetricsError> {
        match compute_latency(t_send, t_receive) {
            Ok(s) => {
                self.samples.lock().push(s);
                Ok(s)
            }
            Err(e) => {
                *self.anomalies.lock() += 1;
                Err(e)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.samples.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn anomalies(&self) -> u64 {
        *self.anomalies.lock()
    }

    pub fn snapshot(&self) -> Vec<LatencySample> {
        self.samples.lock().clone()
    }

    pub fn latencies(&self) -> Vec<u64> {
        self.samples.lock().iter().map(|s| s.latency).collect()
    }
}

/// CPU time consumed by this process so far, across all threads.
pub fn process_cpu_time() -> Duration {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid out-pointer for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_PROCESS_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return Duration::ZERO;
    }
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

fn cores() -> f64 {
    thread::available_parallelism().map_or(1, |n| n.get()) as f64
}

/// Samples process CPU utilization at a fixed period on a background
/// thread. Each sample is CPU time over wall time, divided by the number of
/// available cores, so it lies in `[0, 1]`.
pub struct CpuSampler {
    samples: Arc<Mutex<Vec<f64>>>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl CpuSampler {
    pub fn start() -> CpuSampler {
        CpuSampler::with_period(CPU_SAMPLE_PERIOD)
    }

    pub fn with_period(period: Duration) -> CpuSampler {
        let samples = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let thread = {
            let samples = samples.clone();
            let stop = stop.clone();
            thread::Builder::new()
                .name("cpu-sampler".into())
                .spawn(move || {
                    let cores = cores();
                    let mut wall = Instant::now();
                    let mut cpu = process_cpu_time();
                    while !stop.load(Ordering::Acquire) {
                        thread::sleep(period);
                        let (w, c) = (Instant::now(), process_cpu_time());
                        let dw = w.duration_since(wall).as_secs_f64();
                        if dw > 0.0 {
                            let frac = c.saturating_sub(cpu).as_secs_f64() / dw / cores;
                            samples.lock().push(frac.clamp(0.0, 1.0));
                        }
                        (wall, cpu) = (w, c);
                    }
                })
                .expect("spawn cpu sampler")
        };
        CpuSampler {
            samples,
            stop,
            thread: Some(thread),
        }
    }

    pub fn samples(&self) -> Vec<f64> {
        self.samples.lock().clone()
    }

    /// Stops sampling and reports the mean utilization.
    pub fn finish(mut self) -> Result<CpuReport, MetricsError> {
        self.halt();
        compute_cpu(&self.samples.lock())
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for CpuSampler {
    fn drop(&mut self) {
        self.halt();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collector_keeps_every_sample() {
        let c = LatencyCollector::new();
        let handles: Vec<_> = (0..4u64)
            .map(|t| {
                let c = c.clone();
                thread::spawn(move || {
                    for i in 0..250 {
                        c.record(i, i + t).unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(c.len(), 1000);
        assert!(c.record(10, 9).is_err());
        assert_eq!(c.anomalies(), 1);
        assert_eq!(c.len(), 1000);
    }

    #[test]
    fn cpu_time_is_monotonic() {
        let a = process_cpu_time();
        let mut x = 0u64;
        for i in 0..2_000_000u64 {
            x = x.wrapping_mul(31).wrapping_add(i);
        }
        std::hint::black_box(x);
        assert!(process_cpu_time() >= a);
    }
}
