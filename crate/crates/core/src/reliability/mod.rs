//! Delivery guarantees: QoS profiles, publisher retransmission, subscriber
//! duplicate suppression and ordering. Liveness monitoring and reconnection
//! live with the node, which owns the connection.

mod dedup;
mod qos;
mod retry;

pub use dedup::{Admission, DedupWindow, InboundStream, StreamCounters};
pub use qos::{backoff_delay, QosError, QosProfile, ReliabilityMode};
pub use retry::{RetryAction, RetryCounters, RetryState, RetryTable};

/// Sequence numbers remembered per (publisher, topic) for duplicate
/// suppression.
pub const DEDUP_WINDOW: usize = 1024;
