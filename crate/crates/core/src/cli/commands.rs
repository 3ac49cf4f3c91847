use std::fs::File;
use std::io::{self, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use bytes::Bytes;

use super::{BenchArgs, BenchKind, Command, LogCommand, ReplayModeArg, StopArgs, TransportArg};
use crate::bench::{self, BenchScenario, BenchTransport};
use crate::datalogger::{self, ReplayMode, ReplayOptions};
use crate::envelope::{decode_typed_payload, Audio, Image, PayloadType, PixelFormat, SampleFormat, Value, VideoChunk, VideoCodec};
use crate::executor::{spawn, CfsExecutor, Executor, SchedulerConfig, SpinHandle};
use crate::nodegraph::{Node, RateController, TopicSpec};
use crate::reliability::QosProfile;
use crate::transport::{broker_serve, BrokerConfig, EndpointAddress, FaultProfile};

type CmdResult = Result<(), Box<dyn std::error::Error>>;

pub(super) fn run(command: Command) -> CmdResult {
    match command {
        Command::Broker { listen, duration } => broker(&listen, duration),
        Command::Pub {
            broker,
            topic,
            payload_type,
            rate,
            payload_size,
            reliable,
            stop,
        } => publish(&broker.broker, &topic, payload_type, rate, payload_size, reliable, stop),
        Command::Sub {
            broker,
            topic,
            payload_type,
            reliable,
            stop,
        } => subscribe(&broker.broker, &topic, payload_type, reliable, stop),
        Command::Echo { broker, topic, stop } => echo(&broker.broker, &topic, stop),
        Command::Graph { broker } => graph(&broker.broker),
        Command::Log { action } => log_command(action),
        Command::Bench(args) => bench(args),
    }
}

fn node_name(role: &str) -> String {
    format!("metaros_{role}_{}", std::process::id())
}

fn connect(address: &EndpointAddress, role: &str) -> Result<Node, Box<dyn std::error::Error>> {
    Ok(Node::connect(&node_name(role), address)?)
}

fn spin(node: &Node) -> SpinHandle<CfsExecutor> {
    let mut exec = CfsExecutor::new(SchedulerConfig::default());
    exec.add_node(node);
    spawn(exec)
}

fn seconds(s: f64) -> Result<Duration, Box<dyn std::error::Error>> {
    Duration::try_from_secs_f64(s).map_err(|_| format!("invalid duration {s}").into())
}

/// Blocks until `count` reaches the stop count or the duration passes.
/// Without either it blocks forever.
fn wait_until_done(stop: StopArgs, count: &AtomicU64) -> CmdResult {
    let deadline = stop.duration.map(seconds).transpose()?.map(|d| Instant::now() + d);
    loop {
        if stop.count.is_some_and(|n| count.load(Ordering::Acquire) >= n) {
            return Ok(());
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            return Ok(());
        }
        thread::sleep(Duration::from_millis(5));
    }
}

fn broker(listen: &EndpointAddress, duration: Option<f64>) -> CmdResult {
    let mut handle = broker_serve(listen, BrokerConfig::default())?;
    eprintln!("broker listening on {}", handle.address());
    match duration {
        Some(s) => thread::sleep(seconds(s)?),
        None => loop {
            thread::park();
        },
    }
    handle.shutdown();
    Ok(())
}

/// Value number `i` of a generated stream; sized types get `size` bytes of
/// content.
pub(crate) fn sample_value(ty: PayloadType, size: usize, i: u64) -> Value {
    let fill = || Bytes::from((0..size).map(|k| (i as usize + k) as u8).collect::<Vec<_>>());
    match ty {
        PayloadType::Null => Value::Null,
        PayloadType::Bool => Value::Bool(i.is_multiple_of(2)),
        PayloadType::Int64 => Value::Int64(i as i64),
        PayloadType::Float64 => Value::Float64(i as f64 * 0.5),
        PayloadType::StringUtf8 => {
            let mut s = format!("msg {i}");
            while s.len() < size {
                s.push('.');
            }
            Value::String(s)
        }
        PayloadType::Bytes => Value::Bytes(fill()),
        PayloadType::Image => Value::Image(Image {
            width: size as u32,
            height: 1,
            channels: 1,
            pixel_format: PixelFormat::Gray8,
            data: fill(),
        }),
        PayloadType::Audio => {
            let frames = size / 2;
            Value::Audio(Audio {
                sample_rate: 16_000,
                channels: 1,
                sample_format: SampleFormat::Pcm16Le,
                frame_count: frames as u32,
                data: Bytes::from(vec![0u8; frames * 2]),
            })
        }
        PayloadType::VideoChunk => Value::VideoChunk(VideoChunk {
            codec: VideoCodec::Raw,
            chunk_index: i as u32,
            keyframe: i.is_multiple_of(30),
            data: fill(),
        }),
    }
}

fn qos(reliable: bool) -> QosProfile {
    if reliable {
        QosProfile::reliable().with_depth(256)
    } else {
        QosProfile::best_effort().with_depth(256)
    }
}

fn publish(
    address: &EndpointAddress,
    topic: &str,
    ty: PayloadType,
    rate: f64,
    size: usize,
    reliable: bool,
    stop: StopArgs,
) -> CmdResult {
    let node = connect(address, "pub")?;
    let publisher = node.advertise(&TopicSpec::new(topic, ty).with_qos(qos(reliable)))?;
    let mut pace = RateController::from_hz(rate)?;
    let deadline = stop.duration.map(seconds).transpose()?.map(|d| Instant::now() + d);
    let mut i = 0u64;
    while stop.count.is_none_or(|n| i < n) && deadline.is_none_or(|d| Instant::now() < d) {
        publisher.publish(sample_value(ty, size, i))?;
        i += 1;
        if stop.count.is_none_or(|n| i < n) {
            pace.sleep();
        }
    }
    if reliable && !publisher.wait_settled(Duration::from_secs(10)) {
        return Err("unacknowledged messages at exit".into());
    }
    let failed = publisher.take_failures();
    if !failed.is_empty() {
        return Err(format!("{} messages were not delivered", failed.len()).into());
    }
    eprintln!("published {i} messages on {topic}");
    node.shutdown();
    Ok(())
}

fn subscribe(address: &EndpointAddress, topic: &str, ty: PayloadType, reliable: bool, stop: StopArgs) -> CmdResult {
    let node = connect(address, "sub")?;
    let count = Arc::new(AtomicU64::new(0));
    let c = count.clone();
    let limit = stop.count;
    let _sub = node.subscribe(&TopicSpec::new(topic, ty).with_qos(qos(reliable)), move |m| {
        if limit.is_some_and(|n| c.load(Ordering::Relaxed) >= n) {
            return;
        }
        let mut out = io::stdout().lock();
        let _ = writeln!(out, "{} seq={} {}", m.topic, m.sequence, m.value);
        let _ = out.flush();
        c.fetch_add(1, Ordering::Release);
    })?;
    let _exec = spin(&node);
    eprintln!("subscribed to {topic}");
    wait_until_done(stop, &count)
}

fn echo(address: &EndpointAddress, pattern: &str, stop: StopArgs) -> CmdResult {
    let node = connect(address, "echo")?;
    let count = Arc::new(AtomicU64::new(0));
    let c = count.clone();
    let limit = stop.count;
    let _sub = node.subscribe_raw(pattern, QosProfile::best_effort().with_depth(1024), move |f| {
        if limit.is_some_and(|n| c.load(Ordering::Relaxed) >= n) {
            return;
        }
        let value = decode_typed_payload(f.payload_type, &f.payload)
            .map(|v| v.to_string())
            .unwrap_or_else(|e| format!("<{e}>"));
        let mut out = io::stdout().lock();
        let _ = writeln!(
            out,
            "{} {} seq={} bytes={} {}",
            f.topic,
            f.payload_type,
            f.sequence,
            f.payload.len(),
            value
        );
        let _ = out.flush();
        c.fetch_add(1, Ordering::Release);
    })?;
    let _exec = spin(&node);
    eprintln!("subscribed to {pattern}");
    wait_until_done(stop, &count)
}

fn graph(address: &EndpointAddress) -> CmdResult {
    let node = connect(address, "graph")?;
    let info = node.graph()?;
    println!("{}", serde_json::to_string_pretty(&info)?);
    node.shutdown();
    Ok(())
}

fn log_command(action: LogCommand) -> CmdResult {
    match action {
        LogCommand::Record {
            broker,
            topics,
            output,
            stop,
        } => {
            let node = connect(&broker.broker, "log")?;
            let patterns: Vec<&str> = topics.iter().map(String::as_str).collect();
            let recorder = datalogger::record(&node, &patterns, &output)?;
            let _exec = spin(&node);
            eprintln!("recording {} to {}", topics.join(", "), output.display());
            let count = AtomicU64::new(0);
            let deadline = stop.duration.map(seconds).transpose()?.map(|d| Instant::now() + d);
            loop {
                count.store(recorder.frames(), Ordering::Release);
                if stop.count.is_some_and(|n| count.load(Ordering::Acquire) >= n)
                    || deadline.is_some_and(|d| Instant::now() >= d)
                    || recorder.failed()
                {
                    break;
                }
                thread::sleep(Duration::from_millis(5));
            }
            let stats = recorder.close()?;
            eprintln!("recorded {} frames, {} bytes", stats.frames, stats.bytes);
            Ok(())
        }
        LogCommand::Replay {
            broker,
            input,
            mode,
            reliable,
        } => {
            let node = connect(&broker.broker, "replay")?;
            let mode = match mode {
                ReplayModeArg::Timed => ReplayMode::Timed,
                ReplayModeArg::Fast => ReplayMode::Fast,
            };
            let stats = datalogger::replay_with(&input, &node, &ReplayOptions::new(mode).with_qos(qos(reliable)))?;
            eprintln!(
                "replayed {} frames on {} topics in {:.3} s",
                stats.published,
                stats.topics,
                stats.elapsed.as_secs_f64()
            );
            node.shutdown();
            Ok(())
        }
    }
}

fn scenario(args: &BenchArgs) -> Result<BenchScenario, Box<dyn std::error::Error>> {
    let transport = match args.transport {
        TransportArg::Inproc => BenchTransport::Inproc,
        TransportArg::Tcp => BenchTransport::Tcp,
    };
    let mut s = BenchScenario::new(transport)
        .with_payload_sizes(args.payload_sizes.clone())
        .with_duration(seconds(args.duration)?)
        .with_count(args.count)
        .with_seed(args.seed);
    if args.reliable {
        s = s.with_qos(bench::loopback_reliable_qos());
    }
    if args.drop.is_some() || args.duplicate.is_some() || args.delay_ms.is_some() {
        let delay = seconds(args.delay_ms.unwrap_or(0.0) / 1e3)?;
        s = s.with_faults(
            FaultProfile::lossy(args.drop.unwrap_or(0.0), args.seed)
                .with_duplicates(args.duplicate.unwrap_or(0.0))
                .with_delay(delay, delay),
        );
    }
    s.validate()?;
    Ok(s)
}

fn bench(args: BenchArgs) -> CmdResult {
    let s = scenario(&args)?;
    let mut out: Box<dyn Write> = match &args.output {
        Some(path) => Box::new(File::create(path)?),
        None => Box::new(io::stdout().lock()),
    };
    match args.kind {
        BenchKind::Throughput | BenchKind::Latency => {
            let (name, legs) = if args.kind == BenchKind::Throughput {
                ("throughput", bench::run_throughput(&s)?)
            } else {
                ("latency", bench::run_latency(&s)?)
            };
            let rows: Vec<_> = legs.iter().map(|l| l.row).collect();
            bench::write_rows_csv(&mut out, &s, name, &rows)?;
            eprint!("{}", bench::summary_table(&rows));
        }
        BenchKind::Reliability => {
            let r = bench::run_reliability(&s)?;
            bench::write_reliability_csv(&mut out, &s, &r)?;
            eprintln!(
                "sent={} delivered={} unique={} duplicates={} in_order={} retransmissions={} failed={}",
                r.sent, r.delivered, r.unique, r.duplicates, r.in_order, r.retransmissions, r.failed
            );
            if args.reliable && (r.delivered != r.sent || r.failed > 0) {
                return Err("reliable run lost messages".into());
            }
        }
    }
    out.flush()?;
    Ok(())
}
