//! Append-only frame logs: recording from live subscriptions and replay as
//! fresh publications.
//!
//! A log is the 8-byte magic `MROSLOG1` followed by records of a big-endian
//! `u32` length and the encoded frame.

mod format;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use thiserror::Error;

pub use format::{encode_record, read_log, read_log_from, record_len, LogContents, LogReader, LOG_MAGIC};

use crate::envelope::{CodecError, Frame, FrameKind, PayloadType};
use crate::nodegraph::{Node, NodeError, Publisher, Subscription, TopicSpec};
use crate::reliability::QosProfile;

/// Frames buffered before a forced flush.
pub const FLUSH_EVERY_FRAMES: u64 = 100;
/// Longest time a recorded frame may sit in the write buffer.
pub const FLUSH_INTERVAL: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a frame log")]
    BadMagic,
    #[error("unknown log format version {}", *.0 as char)]
    UnknownVersion(u8),
    #[error("corrupt record at byte {offset}: {source}")]
    Corrupt { offset: u64, source: CodecError },
    #[error("frame of {0} bytes does not fit a log record")]
    RecordTooLarge(usize),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("topic {topic} recorded as {recorded} but replayed as {advertised}")]
    TypeConflict {
        topic: String,
        recorded: PayloadType,
        advertised: PayloadType,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecordStats {
    pub frames: u64,
    /// File size, header included.
    pub bytes: u64,
}

/// Live recording session. Frames arrive through subscriptions on the
/// node, so the node must be attached to a spinning executor.
pub struct Recorder {
    subscriptions: Vec<Subscription>,
    tx: Option<Sender<Frame>>,
    writer: Option<JoinHandle<Result<RecordStats, LogError>>>,
    frames: Arc<AtomicU64>,
}

impl Recorder {
    /// Frames handed to the writer so far.
    pub fn frames(&self) -> u64 {
        self.frames.load(Ordering::Relaxed)
    }

    /// Whether the writer stopped on an error, which `close` reports.
    pub fn failed(&self) -> bool {
        self.writer.as_ref().is_some_and(|w| w.is_finished())
    }

    /// Unsubscribes, writes every pending frame and closes the file.
    pub fn close(mut self) -> Result<RecordStats, LogError> {
        self.stop()
    }

    fn stop(&mut self) -> Result<RecordStats, LogError> {
        self.subscriptions.clear();
        self.tx.take();
        match self.writer.take() {
            Some(w) => w.join().unwrap_or_else(|_| Err(std::io::Error::other("log writer panicked").into())),
            None => Ok(RecordStats::default()),
        }
    }
}

impl Drop for Recorder {
    fn drop(&mut self) {
        if let Err(e) = self.stop() {
            log::warn!("recording ended with error: {e}");
        }
    }
}

/// Records every DATA frame matching `patterns` to a new file at `path`.
pub fn record(node: &Node, patterns: &[&str], path: impl AsRef<Path>) -> Result<Recorder, LogError> {
    record_with(node, patterns, path, QosProfile::best_effort().with_depth(4096))
}

/// As [`record`], with the QoS of the recording subscriptions.
pub fn record_with(
    node: &Node,
    patterns: &[&str],
    path: impl AsRef<Path>,
    qos: QosProfile,
) -> Result<Recorder, LogError> {
    let mut file = File::create(path)?;
    file.write_all(&LOG_MAGIC)?;
    file.flush()?;
    let (tx, rx) = crossbeam_channel::unbounded();
    let frames = Arc::new(AtomicU64::new(0));
    let writer = thread::Builder::new()
        .name("log-writer".into())
        .spawn(move || write_loop(file, rx))?;
    let mut recorder = Recorder {
        subscriptions: Vec::new(),
        tx: Some(tx.clone()),
        writer: Some(writer),
        frames: frames.clone(),
    };
    for pattern in patterns {
        let tx = tx.clone();
        let frames = frames.clone();
        let sub = node.subscribe_raw(pattern, qos.clone(), move |f| {
            if f.kind == FrameKind::Data && tx.send(f).is_ok() {
                frames.fetch_add(1, Ordering::Relaxed);
            }
        })?;
        recorder.subscriptions.push(sub);
    }
    Ok(recorder)
}

fn write_loop(file: File, rx: Receiver<Frame>) -> Result<RecordStats, LogError> {
    let mut out = BufWriter::with_capacity(1 << 16, file);
    let header = LOG_MAGIC.len() as u64;
    let mut stats = RecordStats { frames: 0, bytes: header };
    // size of the file as of the last successful flush
    let mut durable = header;
    let mut unflushed = 0u64;
    let mut last_flush = Instant::now();
    let mut buf = Vec::new();
    let result = loop {
        let wait = FLUSH_INTERVAL.saturating_sub(last_flush.elapsed());
        let frame = match rx.recv_timeout(wait) {
            Ok(f) => Some(f),
            Err(RecvTimeoutError::Timeout) => None,
            Err(RecvTimeoutError::Disconnected) => break out.flush().map_err(LogError::from),
        };
        if let Some(f) = frame {
            buf.clear();
            if let Err(e) = encode_record(&f, &mut buf) {
                break Err(e);
            }
            if let Err(e) = out.write_all(&buf) {
                break Err(e.into());
            }
            stats.frames += 1;
            stats.bytes += buf.len() as u64;
            unflushed += 1;
        }
        if unflushed > 0 && (unflushed >= FLUSH_EVERY_FRAMES || last_flush.elapsed() >= FLUSH_INTERVAL) {
            if let Err(e) = out.flush() {
                break Err(e.into());
            }
            durable = stats.bytes;
            unflushed = 0;
            last_flush = Instant::now();
        } else if unflushed == 0 {
            last_flush = Instant::now();
        }
    };
    match result {
        Ok(()) => Ok(stats),
        Err(e) => {
            // drop any partially written record
            let _ = out.get_ref().set_len(durable);
            Err(e)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayMode {
    /// Reproduces the recorded gaps between send timestamps.
    Timed,
    /// Publishes back to back.
    Fast,
}

#[derive(Debug, Clone)]
pub struct ReplayOptions {
    pub mode: ReplayMode,
    pub qos: QosProfile,
    /// How long a reliable replay waits for outstanding acks at the end.
    pub settle_timeout: Duration,
}

impl ReplayOptions {
    pub fn new(mode: ReplayMode) -> ReplayOptions {
        ReplayOptions {
            mode,
            qos: QosProfile::best_effort(),
            settle_timeout: Duration::from_secs(10),
        }
    }

    pub fn with_qos(mut self, qos: QosProfile) -> ReplayOptions {
        self.qos = qos;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayStats {
    pub published: u64,
    /// Records that were not DATA frames.
    pub skipped: u64,
    pub topics: usize,
    pub truncated_tail: u64,
    pub elapsed: Duration,
}

/// Republishes the DATA frames of a log in file order, with fresh
/// sequence numbers and timestamps.
pub fn replay(path: impl AsRef<Path>, node: &Node, mode: ReplayMode) -> Result<ReplayStats, LogError> {
    replay_with(path, node, &ReplayOptions::new(mode))
}

pub fn replay_with(path: impl AsRef<Path>, node: &Node, opts: &ReplayOptions) -> Result<ReplayStats, LogError> {
    let mut reader = LogReader::open(path)?;
    let mut publishers: HashMap<String, Publisher> = HashMap::new();
    let mut stats = ReplayStats::default();
    let start = Instant::now();
    let mut first_ts: Option<u64> = None;
    for frame in reader.by_ref() {
        let frame = frame?;
        if frame.kind != FrameKind::Data {
            stats.skipped += 1;
            continue;
        }
        if opts.mode == ReplayMode::Timed {
            let t0 = *first_ts.get_or_insert(frame.timestamp_send);
            let due = start + Duration::from_nanos(frame.timestamp_send.saturating_sub(t0));
            let now = Instant::now();
            if due > now {
                thread::sleep(due - now);
            }
        }
        let publisher = match publishers.get(&frame.topic) {
            Some(p) => p,
            None => {
                let spec = TopicSpec::new(frame.topic.clone(), frame.payload_type).with_qos(opts.qos.clone());
                publishers.entry(frame.topic.clone()).or_insert(node.advertise(&spec)?)
            }
        };
        if publisher.payload_type() != frame.payload_type {
            return Err(LogError::TypeConflict {
                topic: frame.topic,
                recorded: frame.payload_type,
                advertised: publisher.payload_type(),
            });
        }
        publisher.publish_payload(frame.payload)?;
        stats.published += 1;
    }
    if opts.qos.is_reliable() {
        for p in publishers.values() {
            p.wait_settled(opts.settle_timeout);
        }
    }
    stats.topics = publishers.len();
    stats.truncated_tail = reader.truncated_tail();
    stats.elapsed = start.elapsed();
    Ok(stats)
}
