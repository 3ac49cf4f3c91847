use std::sync::Arc;
use std::time::Duration;

use crate::envelope::Frame;

use super::{EndpointAddress, Scheme, TransportError};

/// A full-duplex, ordered frame stream to a broker.
///
/// `send_frame` may be called from any number of threads; `recv_frame` is
/// meant for a single consumer.
pub trait Connection: Send + Sync {
    fn send_frame(&self, frame: Frame) -> Result<(), TransportError>;

    /// Waits up to `timeout` for the next inbound frame. `Ok(None)` means the
    /// wait timed out; a closed connection is an error.
    fn recv_frame(&self, timeout: Duration) -> Result<Option<Frame>, TransportError>;

    fn close(&self);

    fn is_closed(&self) -> bool;
}

pub type SharedConnection = Arc<dyn Connection>;

/// Something that can open (and later re-open) a connection. Nodes hold a
/// connector rather than a connection so they can reconnect after a broker
/// failure.
pub trait Connector: Send + Sync {
    fn connect(&self) -> Result<SharedConnection, TransportError>;

    fn describe(&self) -> String;
}

impl Connector for EndpointAddress {
    fn connect(&self) -> Result<SharedConnection, TransportError> {
        connect(self)
    }

    fn describe(&self) -> String {
        self.to_string()
    }
}

pub fn connect(address: &EndpointAddress) -> Result<SharedConnection, TransportError> {
    match address.scheme {
        Scheme::Inproc => super::inproc::connect(&address.target),
        Scheme::Tcp => super::tcp::connect(address),
    }
}
