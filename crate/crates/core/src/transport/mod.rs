//! Frame transports: the broker, in-process and TCP connections, and a
//! fault-injecting connection wrapper.

mod address;
pub mod broker;
mod connection;
pub mod faults;
mod inproc;
mod server;
pub mod tcp;
pub mod topic;

use thiserror::Error;

use crate::envelope::CodecError;

pub use address::{EndpointAddress, Scheme, BROKER_ENV, DEFAULT_TCP_PORT};
pub use broker::{BrokerConfig, BrokerCore, GraphInfo, TopicInfo};
pub use connection::{connect, Connection, Connector, SharedConnection};
pub use faults::{wrap_with_faults, FaultProfile, FaultyConnection, FaultyConnector};
pub use server::{broker_serve, serve_listener, BrokerHandle};
pub use topic::topic_matches;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connection closed")]
    Closed,
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("cannot bind {0}")]
    Bind(String),
    #[error("address already in use: {0}")]
    AddressInUse(String),
    #[error("invalid endpoint address: {0}")]
    InvalidAddress(String),
    #[error("invalid fault profile: {0}")]
    InvalidFaultProfile(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
