//! Self-benchmarks: throughput, latency and reliability legs over the
//! in-process or TCP loopback transport.
//!
//! Every leg runs a broker, a publishing node and a subscribing node in
//! this process and reports the metrics of [`crate::metrics`].

mod legs;

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

pub use legs::{run_latency, run_reliability, run_throughput};

use crate::metrics::MetricsError;
use crate::nodegraph::NodeError;
use crate::reliability::QosProfile;
use crate::transport::{FaultProfile, TransportError};

pub const DEFAULT_PAYLOAD_SIZES: [usize; 4] = [256, 4096, 65_536, 1_048_576];
pub const DEFAULT_SEED: u64 = 1;

/// Reliable QoS for loopback runs. Round trips take microseconds there,
/// so an ack is overdue after tens of milliseconds.
pub fn loopback_reliable_qos() -> QosProfile {
    QosProfile::reliable()
        .with_depth(1024)
        .with_retries(20)
        .with_ack_timeout(Duration::from_millis(40))
        .with_backoff(Duration::from_millis(10), Duration::from_millis(200))
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Incomplete(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BenchTransport {
    Inproc,
    Tcp,
}

impl fmt::Display for BenchTransport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchTransport::Inproc => "inproc",
            BenchTransport::Tcp => "tcp",
        })
    }
}

impl FromStr for BenchTransport {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inproc" => Ok(BenchTransport::Inproc),
            "tcp" => Ok(BenchTransport::Tcp),
            other => Err(BenchError::Scenario(format!("unknown transport {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchScenario {
    pub transport: BenchTransport,
    pub payload_sizes: Vec<usize>,
    /// Publishing time per payload size in throughput legs.
    pub duration: Duration,
    pub qos: QosProfile,
    /// Applied to the publishing node, and to the subscribing node as well
    /// in reliability legs.
    pub faults: Option<FaultProfile>,
    pub seed: u64,
    /// Messages per leg for latency and reliability runs.
    pub count: u64,
    /// Publishing interval of latency legs.
    pub interval: Duration,
}

impl BenchScenario {
    pub fn new(transport: BenchTransport) -> BenchScenario {
        BenchScenario {
            transport,
            payload_sizes: DEFAULT_PAYLOAD_SIZES.to_vec(),
            duration: Duration::from_secs(10),
            qos: QosProfile::best_effort(),
            faults: None,
            seed: DEFAULT_SEED,
            count: 1000,
            interval: Duration::from_millis(1),
        }
    }

    pub fn with_payload_sizes(mut self, sizes: Vec<usize>) -> BenchScenario {
        self.payload_sizes = sizes;
        self
    }

    pub fn with_duration(mut self, duration: Duration) -> BenchScenario {
        self.duration = duration;
        self
    }

    pub fn with_qos(mut self, qos: QosProfile) -> BenchScenario {
        self.qos = qos;
        self
    }

    pub fn with_faults(mut self, faults: FaultProfile) -> BenchScenario {
        self.faults = Some(faults);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> BenchScenario {
        self.seed = seed;
        self
    }

    pub fn with_count(mut self, count: u64) -> BenchScenario {
        self.count = count;
        self
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.payload_sizes.is_empty() || self.payload_sizes.contains(&0) {
            return Err(BenchError::Scenario("payload sizes must be positive".into()));
        }
        if self.duration < Duration::from_secs(1) {
            return Err(BenchError::Scenario("duration must be at least 1 s".into()));
        }
        if self.count == 0 {
            return Err(BenchError::Scenario("count must be positive".into()));
        }
        self.qos.validate().map_err(|e| BenchError::Scenario(e.to_string()))?;
        if let Some(f) = &self.faults {
            f.validate()?;
        }
        Ok(())
    }

    /// `# key=value ...` line describing the run.
    pub fn comment(&self, kind: &str) -> String {
        let sizes: Vec<String> = self.payload_sizes.iter().map(|s| s.to_string()).collect();
        let mut line = format!(
            "bench={kind} transport={} payload_sizes={} duration_s={} qos={} depth={} count={} seed={} latency_unit=ns",
            self.transport,
            sizes.join(";"),
            self.duration.as_secs_f64(),
            if self.qos.is_reliable() { "reliable" } else { "best_effort" },
            self.qos.history_depth,
            self.count,
            self.seed,
        );
        if let Some(f) = &self.faults {
            line += &format!(
                " drop={} duplicate={} delay_ms={}..{}",
                f.drop_probability,
                f.duplicate_probability,
                f.delay_min.as_secs_f64() * 1e3,
                f.delay_max.as_secs_f64() * 1e3
            );
        }
        line
    }
}

/// One summary row: a payload size and its measured metrics. Latencies are
/// in nanoseconds and CPU is the mean utilization fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub payload_size: usize,
    pub msg_per_s: f64,
    pub bit_per_s: f64,
    pub p50_latency: u64,
    pub p99_latency: u64,
    pub cpu_mean: f64,
}

/// A leg's row plus the raw counts it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct LegReport {
    pub row: BenchRow,
    pub sent: u64,
    pub delivered: u64,
    /// Encoded size of every frame in the leg.
    pub frame_len: usize,
    pub bits: u64,
    pub window: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReliabilityReport {
    pub sent: u64,
    pub delivered: u64,
    pub unique: u64,
    /// Messages that reached the callback more than once.
    pub duplicates: u64,
    pub in_order: bool,
    pub retransmissions: u64,
    /// Wire duplicates discarded before the callback.
    pub discarded_duplicates: u64,
    pub failed: u64,
    pub elapsed_ms: u64,
}

pub fn write_rows_csv<W: Write>(out: W, scenario: &BenchScenario, kind: &str, rows: &[BenchRow]) -> Result<(), BenchError> {
    crate::metrics::export::write_rows(out, &[scenario.comment(kind)], rows)?;
    Ok(())
}

pub fn write_reliability_csv<W: Write>(
    out: W,
    scenario: &BenchScenario,
    report: &ReliabilityReport,
) -> Result<(), BenchError> {
    crate::metrics::export::write_rows(out, &[scenario.comment("reliability")], &[*report])?;
    Ok(())
}

/// Fixed-width table of `rows` for terminals.
pub fn summary_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:>12} {:>14} {:>16} {:>14} {:>14} {:>9}\n",
        "payload_size", "msg_per_s", "bit_per_s", "p50_latency", "p99_latency", "cpu_mean"
    );
    for r in rows {
        s += &format!(
            "{:>12} {:>14.1} {:>16.1} {:>11.1} us {:>11.1} us {:>9.3}\n",
            r.payload_size,
            r.msg_per_s,
            r.bit_per_s,
            r.p50_latency as f64 / 1e3,
            r.p99_latency as f64 / 1e3,
            r.cpu_mean
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_validation() {
        let s = BenchScenario::new(BenchTransport::Inproc);
        assert!(s.validate().is_ok());
        assert!(s.clone().with_payload_sizes(vec![0]).validate().is_err());
        assert!(s.clone().with_duration(Duration::from_millis(500)).validate().is_err());
    }

    #[test]
    fn csv_header_carries_scenario_and_seed() {
        let s = BenchScenario::new(BenchTransport::Tcp).with_seed(42).with_payload_sizes(vec![256]);
        let row = BenchRow {
            payload_size: 256,
            msg_per_s: 1.0,
            bit_per_s: 2448.0,
            p50_latency: 10,
            p99_latency: 20,
            cpu_mean: 0.5,
        };
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, &s, "throughput", &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# bench=throughput transport=tcp"));
        assert!(lines[0].contains("seed=42"));
        assert_eq!(lines[1], "payload_size,msg_per_s,bit_per_s,p50_latency,p99_latency,cpu_mean");
        assert_eq!(lines.len(), 3);
    }
}
