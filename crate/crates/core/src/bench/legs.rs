use std::collections::HashSet;
use std::net::TcpListener;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::Mutex;

use super::{BenchError, BenchRow, BenchScenario, BenchTransport, LegReport, ReliabilityReport};
use crate::envelope::{now_nanos, Frame, FrameKind, PayloadType};
use crate::executor::{spawn, CfsExecutor, Executor, SchedulerConfig, SpinHandle};
use crate::metrics::{
    compute_bandwidth, compute_throughput, summarize, CpuSampler, LatencyCollector,
};
use crate::nodegraph::{Message, Node, NodeOptions, TopicSpec};
use crate::transport::{
    broker_serve, serve_listener, BrokerConfig, BrokerHandle, EndpointAddress, FaultProfile, FaultyConnector,
};

/// Upper bound on bytes published but not yet delivered.
const IN_FLIGHT_BYTES: usize = 64 << 20;
const MAX_IN_FLIGHT: usize = 2048;
/// A leg ends once deliveries stall for this long.
const QUIET: Duration = Duration::from_secs(1);

static NEXT_RIG: AtomicU64 = AtomicU64::new(0);

struct Rig {
    // dropped last so nodes disconnect first
    exec: Option<SpinHandle<CfsExecutor>>,
    talker: Node,
    listener: Node,
    _broker: BrokerHandle,
}

impl Drop for Rig {
    fn drop(&mut self) {
        if let Some(e) = self.exec.take() {
            e.stop();
        }
        self.talker.shutdown();
        self.listener.shutdown();
    }
}

fn start_broker(transport: BenchTransport) -> Result<BrokerHandle, BenchError> {
    Ok(match transport {
        BenchTransport::Inproc => {
            let key = format!("bench-{}-{}", std::process::id(), NEXT_RIG.fetch_add(1, Ordering::Relaxed));
            broker_serve(&EndpointAddress::inproc(key), BrokerConfig::default())?
        }
        BenchTransport::Tcp => serve_listener(
            TcpListener::bind("127.0.0.1:0").map_err(crate::transport::TransportError::from)?,
            BrokerConfig::default(),
        )?,
    })
}

fn connect(name: &str, address: &EndpointAddress, faults: Option<FaultProfile>, seed: u64) -> Result<Node, BenchError> {
    let opts = NodeOptions::default().with_seed(seed);
    Ok(match faults {
        Some(profile) => Node::with_connector(name, FaultyConnector::new(address.clone(), profile)?, opts)?,
        None => Node::with_connector(name, address.clone(), opts)?,
    })
}

/// Broker plus publishing and subscribing nodes. `faults` wrap the
/// publisher, and the subscriber too when `both` is set.
fn rig(s: &BenchScenario, both: bool) -> Result<Rig, BenchError> {
    let broker = start_broker(s.transport)?;
    let talker = connect("bench_pub", broker.address(), s.faults.clone(), s.seed)?;
    let listener_faults = s.faults.clone().filter(|_| both).map(|mut f| {
        f.seed = f.seed.wrapping_add(1);
        f
    });
    let listener = connect("bench_sub", broker.address(), listener_faults, s.seed.wrapping_add(1))?;
    Ok(Rig {
        exec: None,
        talker,
        listener,
        _broker: broker,
    })
}

impl Rig {
    fn spin(&mut self) {
        let mut exec = CfsExecutor::new(SchedulerConfig::default());
        exec.add_node(&self.listener);
        self.exec = Some(spawn(exec));
    }
}

/// Delivery counters shared with the subscription callback.
#[derive(Default)]
struct Tally {
    delivered: AtomicU64,
    bits: AtomicU64,
    /// Nanoseconds after `epoch` of the latest delivery.
    last: AtomicU64,
    latencies: LatencyCollector,
}

impl Tally {
    fn callback(self: &Arc<Self>, epoch: Instant) -> impl FnMut(Message) + Send + 'static {
        let t = self.clone();
        move |m: Message| {
            let _ = t.latencies.record(m.timestamp_send, now_nanos());
            t.bits.fetch_add(m.encoded_len as u64 * 8, Ordering::Relaxed);
            t.last.store(epoch.elapsed().as_nanos() as u64, Ordering::Relaxed);
            t.delivered.fetch_add(1, Ordering::Release);
        }
    }

    fn delivered(&self) -> u64 {
        self.delivered.load(Ordering::Acquire)
    }

    /// Waits until `target` deliveries or until they stall.
    fn settle(&self, target: u64) {
        let mut seen = self.delivered();
        let mut since = Instant::now();
        while seen < target && since.elapsed() < QUIET {
            thread::sleep(Duration::from_millis(1));
            let now = self.delivered();
            if now != seen {
                seen = now;
                since = Instant::now();
            }
        }
    }

    fn report(&self, size: usize, sent: u64, frame_len: usize, cpu: f64) -> Result<LegReport, BenchError> {
        let delivered = self.delivered();
        if delivered == 0 {
            return Err(BenchError::Incomplete(format!("no messages delivered at payload size {size}")));
        }
        let window = Duration::from_nanos(self.last.load(Ordering::Relaxed).max(1));
        let bits = self.bits.load(Ordering::Relaxed);
        let lat = summarize(&self.latencies.latencies())?;
        Ok(LegReport {
            row: BenchRow {
                payload_size: size,
                msg_per_s: compute_throughput(delivered, window)?.rate,
                bit_per_s: compute_bandwidth(bits, window)?.rate,
                p50_latency: lat.p50,
                p99_latency: lat.p99,
                cpu_mean: cpu,
            },
            sent,
            delivered,
            frame_len,
            bits,
            window,
        })
    }
}

fn frame_len(topic: &str, size: usize) -> usize {
    Frame::new(FrameKind::Data, topic).with_payload(PayloadType::Bytes, vec![0u8; size]).encoded_len()
}

fn cpu_mean(sampler: CpuSampler) -> f64 {
    sampler.finish().map(|r| r.mean).unwrap_or(0.0)
}

/// Publishes as fast as delivery allows for `duration` at each payload size,
/// keeping a bounded number of messages in flight.
pub fn run_throughput(s: &BenchScenario) -> Result<Vec<LegReport>, BenchError> {
    s.validate()?;
    s.payload_sizes.iter().map(|&size| throughput_leg(s, size)).collect()
}

fn throughput_leg(s: &BenchScenario, size: usize) -> Result<LegReport, BenchError> {
    const TOPIC: &str = "bench/throughput";
    let len = frame_len(TOPIC, size);
    let window = (IN_FLIGHT_BYTES / len).clamp(8, MAX_IN_FLIGHT) as u64;
    let mut rig = rig(s, false)?;
    let qos = s.qos.clone().with_depth(s.qos.history_depth.max(window as usize));
    let spec = TopicSpec::new(TOPIC, PayloadType::Bytes).with_qos(qos);
    let tally = Arc::new(Tally::default());
    let epoch = Instant::now();
    let _sub = rig.listener.subscribe(&spec, tally.callback(epoch))?;
    rig.spin();
    let publisher = rig.talker.advertise(&spec)?;
    let payload = Bytes::from(vec![0xA5u8; size]);

    let cpu = CpuSampler::start();
    let start = Instant::now();
    tally.last.store(epoch.elapsed().as_nanos() as u64, Ordering::Relaxed);
    let base = tally.last.load(Ordering::Relaxed);
    let mut sent = 0u64;
    while start.elapsed() < s.duration {
        if sent - tally.delivered() >= window {
            std::hint::spin_loop();
            thread::yield_now();
            continue;
        }
        publisher.publish_payload(payload.clone())?;
        sent += 1;
    }
    tally.settle(sent);
    let cpu = cpu_mean(cpu);
    // measure the window from the first publish
    tally.last.fetch_sub(base, Ordering::Relaxed);
    tally.report(size, sent, len, cpu)
}

/// Publishes `count` messages per payload size at a fixed interval and
/// reports the one-way latency distribution.
pub fn run_latency(s: &BenchScenario) -> Result<Vec<LegReport>, BenchError> {
    s.validate()?;
    s.payload_sizes.iter().map(|&size| latency_leg(s, size)).collect()
}

fn latency_leg(s: &BenchScenario, size: usize) -> Result<LegReport, BenchError> {
    const TOPIC: &str = "bench/latency";
    let mut rig = rig(s, false)?;
    let qos = s.qos.clone().with_depth(s.qos.history_depth.max(1024));
    let spec = TopicSpec::new(TOPIC, PayloadType::Bytes).with_qos(qos);
    let tally = Arc::new(Tally::default());
    let epoch = Instant::now();
    let _sub = rig.listener.subscribe(&spec, tally.callback(epoch))?;
    rig.spin();
    let publisher = rig.talker.advertise(&spec)?;
    let payload = Bytes::from(vec![0x5Au8; size]);

    let cpu = CpuSampler::start();
    let start = Instant::now();
    let base = epoch.elapsed().as_nanos() as u64;
    for k in 0..s.count {
        let due = start + s.interval * k as u32;
        let now = Instant::now();
        if due > now {
            thread::sleep(due - now);
        }
        publisher.publish_payload(payload.clone())?;
    }
    tally.settle(s.count);
    let cpu = cpu_mean(cpu);
    tally.last.fetch_sub(base.min(tally.last.load(Ordering::Relaxed)), Ordering::Relaxed);
    tally.report(size, s.count, frame_len(TOPIC, size), cpu)
}

/// Sends `count` INT64 messages through the scenario's fault profile,
/// applied to both nodes, and checks what reached the callback.
pub fn run_reliability(s: &BenchScenario) -> Result<ReliabilityReport, BenchError> {
    s.validate()?;
    let mut rig = rig(s, true)?;
    let reliable = s.qos.is_reliable();
    let depth = if reliable { s.qos.history_depth } else { s.count as usize };
    let spec = TopicSpec::new("bench/reliability", PayloadType::Int64).with_qos(s.qos.clone().with_depth(depth.max(16)));
    let values: Arc<Mutex<Vec<i64>>> = Arc::default();
    let v = values.clone();
    let sub = rig.listener.subscribe(&spec, move |m| {
        if let Some(x) = m.value.as_i64() {
            v.lock().push(x);
        }
    })?;
    rig.spin();
    let publisher = rig.talker.advertise(&spec)?;

    let start = Instant::now();
    for i in 1..=s.count as i64 {
        publisher.publish(i)?;
    }
    if reliable {
        publisher.wait_settled(Duration::from_secs(120));
    }
    let mut seen = 0;
    loop {
        thread::sleep(Duration::from_millis(200));
        let now = values.lock().len();
        if now == seen {
            break;
        }
        seen = now;
    }
    let elapsed = start.elapsed();
    let values = values.lock();
    let unique = values.iter().collect::<HashSet<_>>().len() as u64;
    let stats = publisher.stats();
    Ok(ReliabilityReport {
        sent: s.count,
        delivered: values.len() as u64,
        unique,
        duplicates: values.len() as u64 - unique,
        in_order: values.windows(2).all(|w| w[0] < w[1]),
        retransmissions: stats.retry.retransmissions,
        discarded_duplicates: sub.stats().duplicates,
        failed: stats.retry.failed,
        elapsed_ms: elapsed.as_millis() as u64,
    })
}
