//! Performance metrics: end-to-end latency, message throughput, CPU
//! utilization, bandwidth and wire overhead.
//!
//! The computations are pure functions of their samples. Collection lives
//! in [`LatencyCollector`] and [`CpuSampler`], CSV output in [`export`].

mod collect;
pub mod export;

use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::envelope::Frame;

pub use collect::{process_cpu_time, CpuSampler, LatencyCollector, CPU_SAMPLE_PERIOD};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("receive time {t_receive} precedes send time {t_send}")]
    ClockAnomaly { t_send: u64, t_receive: u64 },
    #[error("measurement window must be positive")]
    ZeroWindow,
    #[error("no samples")]
    Empty,
    #[error("CPU sample {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("wire overhead is undefined for an empty payload")]
    EmptyPayload,
}

/// One end-to-end latency measurement, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LatencySample {
    #[serde(rename = "t_send_ns")]
    pub t_send: u64,
    #[serde(rename = "t_receive_ns")]
    pub t_receive: u64,
    #[serde(rename = "latency_ns")]
    pub latency: u64,
}

impl LatencySample {
    pub fn latency(&self) -> Duration {
        Duration::from_nanos(self.latency)
    }
}

/// `L = T_receive - T_send`. Both timestamps must come from one clock.
pub fn compute_latency(t_send: u64, t_receive: u64) -> Result<LatencySample, MetricsError> {
    let latency = t_receive
        .checked_sub(t_send)
        .ok_or(MetricsError::ClockAnomaly { t_send, t_receive })?;
    Ok(LatencySample {
        t_send,
        t_receive,
        latency,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThroughputReport {
    pub message_count: u64,
    pub window_s: f64,
    /// Messages per second.
    pub rate: f64,
}

/// `T_msg = N_msg / T`.
pub fn compute_throughput(message_count: u64, window: Duration) -> Result<ThroughputReport, MetricsError> {
    if window.is_zero() {
        return Err(MetricsError::ZeroWindow);
    }
    let window_s = window.as_secs_f64();
    Ok(ThroughputReport {
        message_count,
        window_s,
        rate: message_count as f64 / window_s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CpuReport {
    pub samples: Vec<f64>,
    pub mean: f64,
}

/// `C = (1/T) Σ C_t` over utilization fractions in `[0, 1]`.
pub fn compute_cpu(samples: &[f64]) -> Result<CpuReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(bad) = samples.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(MetricsError::OutOfRange(*bad));
    }
    Ok(CpuReport {
        samples: samples.to_vec(),
        mean: samples.iter().sum::<f64>() / samples.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandwidthReport {
    pub bits: u64,
    pub window_s: f64,
    /// Bits per second.
    pub rate: f64,
}

/// `T_bit = B / T`, where `B` counts whole encoded frames.
pub fn compute_bandwidth(bits: u64, window: Duration) -> Result<BandwidthReport, MetricsError> {
    if window.is_zero() {
        return Err(MetricsError::ZeroWindow);
    }
    let window_s = window.as_secs_f64();
    Ok(BandwidthReport {
        bits,
        window_s,
        rate: bits as f64 / window_s,
    })
}

/// Bits on the wire for a set of encoded frame sizes.
pub fn frame_bits(sizes: impl IntoIterator<Item = usize>) -> u64 {
    sizes.into_iter().map(|s| s as u64 * 8).sum()
}

/// `S_total / S_payload` for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WireOverheadReport {
    pub total_size: u64,
    pub payload_size: u64,
}

impl WireOverheadReport {
    pub fn overhead(&self) -> f64 {
        self.total_size as f64 / self.payload_size as f64
    }

    /// The ratio as a reduced fraction `(numerator, denominator)`.
    pub fn exact(&self) -> (u64, u64) {
        let g = gcd(self.total_size, self.payload_size);
        (self.total_size / g, self.payload_size / g)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub fn compute_wire_overhead(frame: &Frame) -> Result<WireOverheadReport, MetricsError> {
    overhead_for(frame.encoded_len(), frame.payload.len())
}

pub fn overhead_for(total_size: usize, payload_size: usize) -> Result<WireOverheadReport, MetricsError> {
    if payload_size == 0 {
        return Err(MetricsError::EmptyPayload);
    }
    Ok(WireOverheadReport {
        total_size: total_size as u64,
        payload_size: payload_size as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub min: u64,
    pub mean: f64,
    pub p50: u64,
    pub p95: u64,
    pub p99: u64,
    pub max: u64,
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p/100 * n)`.
pub fn percentile(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn summarize(samples: &[u64]) -> Result<Summary, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let pct = |p| percentile(&sorted, p).expect("nonempty");
    Ok(Summary {
        count: sorted.len(),
        min: sorted[0],
        mean: sorted.iter().map(|&v| v as f64).sum::<f64>() / sorted.len() as f64,
        p50: pct(50.0),
        p95: pct(95.0),
        p99: pct(99.0),
        max: sorted[sorted.len() - 1],
    })
}

#[cfg(test)]
mod tests {
    use bytes::Bytes;
    use proptest::prelude::*;

    use super::*;
    use crate::envelope::{encode_frame, FrameKind, PayloadType};

    fn frame(topic: &str, payload_len: usize) -> Frame {
        Frame::new(FrameKind::Data, topic).with_payload(PayloadType::Bytes, Bytes::from(vec![0xAB; payload_len]))
    }

    #[test]
    fn latency_examples() {
        assert_eq!(compute_latency(100, 100).unwrap().latency, 0);
        assert_eq!(compute_latency(1_000_000, 6_000_000).unwrap().latency(), Duration::from_millis(5));
        assert!(matches!(compute_latency(5, 4), Err(MetricsError::ClockAnomaly { .. })));
    }

    #[test]
    fn throughput_and_bandwidth_examples() {
        assert_eq!(compute_throughput(0, Duration::from_secs(1)).unwrap().rate, 0.0);
        assert_eq!(compute_throughput(30_000, Duration::from_secs(3)).unwrap().rate, 10_000.0);
        assert_eq!(compute_throughput(1, Duration::ZERO), Err(MetricsError::ZeroWindow));
        assert_eq!(compute_bandwidth(8_000_000, Duration::from_secs(1)).unwrap().rate, 8e6);
        let bits = frame_bits(std::iter::repeat_n(153, 1000));
        assert_eq!(compute_bandwidth(bits, Duration::from_secs(1)).unwrap().rate, 1_224_000.0);
        assert_eq!(compute_bandwidth(frame_bits([]), Duration::from_secs(1)).unwrap().rate, 0.0);
    }

    #[test]
    fn cpu_examples() {
        assert_eq!(compute_cpu(&[0.5; 10]).unwrap().mean, 0.5);
        assert_eq!(compute_cpu(&[0.0, 1.0]).unwrap().mean, 0.5);
        assert_eq!(compute_cpu(&[]), Err(MetricsError::Empty));
        assert_eq!(compute_cpu(&[0.2, 1.5]), Err(MetricsError::OutOfRange(1.5)));
    }

    #[test]
    fn overhead_against_encoded_bytes() {
        for (topic, len, expected) in [("chatter", 100, (153, 100)), ("t", 1, (48, 1))] {
            let f = frame(topic, len);
            let bytes = encode_frame(&f).unwrap().len() as u64;
            let r = compute_wire_overhead(&f).unwrap();
            assert_eq!(r.total_size, bytes);
            assert_eq!(r.exact(), expected);
        }
        assert_eq!(compute_wire_overhead(&frame("chatter", 100)).unwrap().overhead(), 1.53);
        let big = compute_wire_overhead(&frame("t", 1 << 20)).unwrap();
        assert!((big.overhead() - 1.0000448).abs() < 1e-7);
        assert_eq!(compute_wire_overhead(&frame("t", 0)), Err(MetricsError::EmptyPayload));
    }

    #[test]
    fn summary_examples() {
        let one = summarize(&[42]).unwrap();
        assert_eq!((one.min, one.p50, one.p95, one.p99, one.max), (42, 42, 42, 42, 42));
        let s = summarize(&(1..=100).collect::<Vec<_>>()).unwrap();
        assert_eq!((s.p50, s.p95, s.p99), (50, 95, 99));
        assert_eq!(s.mean, 50.5);
        assert_eq!(summarize(&[]), Err(MetricsError::Empty));
    }

    proptest! {
        #[test]
        fn percentiles_match_sorting_oracle(mut xs in proptest::collection::vec(0u64..1_000_000, 1..300)) {
            let s = summarize(&xs).unwrap();
            xs.sort();
            let n = xs.len();
            // smallest value with at least p% of samples at or below it
            let oracle = |p: u64| *xs.iter().find(|&&v| xs.iter().filter(|&&w| w <= v).count() as u64 * 100 >= p * n as u64).unwrap();
            prop_assert_eq!(s.p50, oracle(50));
            prop_assert_eq!(s.p95, oracle(95));
            prop_assert_eq!(s.p99, oracle(99));
            prop_assert_eq!(s.min, xs[0]);
            prop_assert_eq!(s.max, xs[n - 1]);
        }

        #[test]
        fn overhead_decreases_toward_one(topic in "[a-z]{1,12}", a in 1usize..5000, b in 1usize..5000) {
            let (small, large) = (a.min(b), a.max(b));
            let lo = compute_wire_overhead(&frame(&topic, small)).unwrap().overhead();
            let hi = compute_wire_overhead(&frame(&topic, large)).unwrap().overhead();
            prop_assert!(hi > 1.0);
            if small < large {
                prop_assert!(hi < lo);
            }
        }
    }
}
