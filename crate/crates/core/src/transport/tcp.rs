//! TCP transport. Frames are written back to back; the header's two length
//! fields are enough to find frame boundaries, so no outer framing is used.

use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender};
use parking_lot::RwLock;

use crate::envelope::{encode_frame_into, read_frame, Frame};

use super::broker::BrokerCore;
use super::{Connection, EndpointAddress, SharedConnection, TransportError};

const WRITE_BATCH: usize = 64 * 1024;
const CLIENT_OUTBOUND: usize = 8192;
const CLIENT_INBOUND: usize = 65_536;
pub const CLOSE_DRAIN: Duration = Duration::from_secs(1);

/// Drains `rx` onto the socket, coalescing queued frames into one write.
fn writer_loop(mut stream: TcpStream, rx: Receiver<Frame>) {
    let mut buf = Vec::with_capacity(WRITE_BATCH);
    while let Ok(first) = rx.recv() {
        buf.clear();
        if encode_frame_into(&first, &mut buf).is_err() {
            continue;
        }
        while buf.len() < WRITE_BATCH {
            match rx.try_recv() {
                Ok(f) => {
                    let _ = encode_frame_into(&f, &mut buf);
                }
                Err(_) => break,
            }
        }
        if stream.write_all(&buf).is_err() {
            break;
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

pub(crate) fn serve(listener: TcpListener, core: Arc<BrokerCore>, stop: Arc<AtomicBool>) {
    for stream in listener.incoming() {
        if stop.load(Ordering::Acquire) || core.is_shut_down() {
            break;
        }
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        let (Ok(write_half), Ok(close_half)) = (stream.try_clone(), stream.try_clone()) else {
            continue;
        };
        let (tx, rx) = bounded(core.config().outbound_capacity);
        let closer: Box<dyn Fn() + Send + Sync> = Box::new(move || {
            let _ = close_half.shutdown(Shutdown::Both);
        });
        let Some(id) = core.attach(tx, Some(closer)) else {
            let _ = stream.shutdown(Shutdown::Both);
            break;
        };
        thread::Builder::new()
            .name(format!("broker-tx-{id}"))
            .spawn(move || writer_loop(write_half, rx))
            .expect("spawn writer");
        let core = Arc::clone(&core);
        thread::Builder::new()
            .name(format!("broker-rx-{id}"))
            .spawn(move || {
                let mut reader = BufReader::with_capacity(WRITE_BATCH, &stream);
                loop {
                    match read_frame(&mut reader) {
                        Ok(Some(frame)) => core.handle(id, frame),
                        Ok(None) => break,
                        Err(e) => {
                            log::debug!("connection {id}: {e}");
                            break;
                        }
                    }
                }
                core.detach(id);
                let _ = stream.shutdown(Shutdown::Both);
            })
            .expect("spawn reader");
    }
}

pub struct TcpConnection {
    stream: TcpStream,
    // taken on close so the writer drains what is queued and exits
    outbound: RwLock<Option<Sender<Frame>>>,
    writer_done: Receiver<()>,
    inbound: Receiver<Frame>,
    closed: Arc<AtomicBool>,
}

pub(crate) fn connect(address: &EndpointAddress) -> Result<SharedConnection, TransportError> {
    let refused = |e: std::io::Error| TransportError::ConnectionRefused(format!("{address}: {e}"));
    let addrs: Vec<_> = address
        .target
        .to_socket_addrs()
        .map_err(refused)?
        .collect();
    let mut last = None;
    let mut stream = None;
    for a in addrs {
        match TcpStream::connect_timeout(&a, Duration::from_secs(2)) {
            Ok(s) => {
                stream = Some(s);
                break;
            }
            Err(e) => last = Some(e),
        }
    }
    let stream = stream.ok_or_else(|| refused(last.unwrap_or_else(|| std::io::ErrorKind::NotFound.into())))?;
    from_stream(stream).map(|c| c as SharedConnection)
}

/// Wraps an already connected socket.
pub fn from_stream(stream: TcpStream) -> Result<Arc<TcpConnection>, TransportError> {
    stream.set_nodelay(true)?;
    let (out_tx, out_rx) = bounded(CLIENT_OUTBOUND);
    let (in_tx, in_rx) = bounded(CLIENT_INBOUND);
    let closed = Arc::new(AtomicBool::new(false));
    let write_half = stream.try_clone()?;
    let (done_tx, done_rx) = bounded::<()>(0);
    thread::Builder::new().name("tcp-client-tx".into()).spawn(move || {
        writer_loop(write_half, out_rx);
        drop(done_tx);
    })?;
    let read_half = stream.try_clone()?;
    let closed_r = Arc::clone(&closed);
    thread::Builder::new().name("tcp-client-rx".into()).spawn(move || {
        let mut reader = BufReader::with_capacity(WRITE_BATCH, &read_half);
        loop {
            match read_frame(&mut reader) {
                Ok(Some(frame)) => {
                    if in_tx.send(frame).is_err() {
                        break;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    log::debug!("tcp client read: {e}");
                    break;
                }
            }
        }
        closed_r.store(true, Ordering::Release);
        let _ = read_half.shutdown(Shutdown::Both);
    })?;
    Ok(Arc::new(TcpConnection {
        stream,
        outbound: RwLock::new(Some(out_tx)),
        writer_done: done_rx,
        inbound: in_rx,
        closed,
    }))
}

impl Connection for TcpConnection {
    fn send_frame(&self, frame: Frame) -> Result<(), TransportError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(TransportError::Closed);
        }
        frame.validate()?;
        match &*self.outbound.read() {
            Some(tx) => tx.send(frame).map_err(|_| TransportError::Closed),
            None => Err(TransportError::Closed),
        }
    }

    fn recv_frame(&self, timeout: Duration) -> Result<Option<Frame>, TransportError> {
        match self.inbound.recv_timeout(timeout) {
            Ok(f) => Ok(Some(f)),
            Err(RecvTimeoutError::Timeout) => {
                if self.closed.load(Ordering::Acquire) {
                    Err(TransportError::Closed)
                } else {
                    Ok(None)
                }
            }
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }

    /// Stops accepting frames, gives the writer up to [`CLOSE_DRAIN`] to
    /// flush what is queued, then shuts the socket.
    fn close(&self) {
        if !self.closed.swap(true, Ordering::AcqRel) {
            self.outbound.write().take();
            let _ = self.writer_done.recv_timeout(CLOSE_DRAIN);
            let _ = self.stream.shutdown(Shutdown::Both);
        }
    }

    fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }
}

impl Drop for TcpConnection {
    fn drop(&mut self) {
        self.close();
    }
}
