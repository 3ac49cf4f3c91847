//! Nodes and their publishers, subscriptions, timers, rate control and
//! typed parameters.

pub(crate) mod node;
mod params;
mod publisher;
mod rate;
mod subscription;

use std::time::Duration;

use thiserror::Error;

use crate::envelope::{PayloadError, PayloadType};
use crate::reliability::{QosError, QosProfile};
use crate::transport::TransportError;

pub use node::{Node, NodeCounters, NodeOptions, NodeStatus};
pub use params::{ParameterDecl, ParameterError, Validator};
pub use publisher::{DeliveryFailed, Publisher, PublisherStats};
pub use rate::{next_deadline_index, RateController, Timer};
pub use subscription::{Message, Subscription, SubscriptionStats};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("invalid node name {0:?}")]
    InvalidName(String),
    #[error("invalid topic or pattern {0:?}")]
    InvalidTopic(String),
    #[error("{0:?} uses the reserved \"__\" prefix")]
    ReservedName(String),
    #[error("type mismatch: expected {expected}, got {actual}")]
    TypeMismatch { expected: PayloadType, actual: PayloadType },
    #[error("rejected by broker: {0}")]
    Rejected(String),
    #[error("no reply from broker within {0:?}")]
    ControlTimeout(Duration),
    #[error("node is not connected")]
    NotConnected,
    #[error("node failed: reconnect budget exhausted")]
    Failed,
    #[error("node is shut down")]
    Shutdown,
    #[error("period must be positive")]
    ZeroPeriod,
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Payload(#[from] PayloadError),
    #[error(transparent)]
    Qos(#[from] QosError),
    #[error(transparent)]
    Parameter(#[from] ParameterError),
}

/// A topic name with its declared payload type and delivery policy.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicSpec {
    pub name: String,
    pub payload_type: PayloadType,
    pub qos: QosProfile,
}

impl TopicSpec {
    pub fn new(name: impl Into<String>, payload_type: PayloadType) -> TopicSpec {
        TopicSpec {
            name: name.into(),
            payload_type,
            qos: QosProfile::default(),
        }
    }

    pub fn with_qos(mut self, qos: QosProfile) -> TopicSpec {
        self.qos = qos;
        self
    }

    pub fn reliable(self) -> TopicSpec {
        let depth = self.qos.history_depth;
        self.with_qos(QosProfile::reliable().with_depth(depth))
    }
}

/// Node names are nonempty, do not start with `/` and contain no
/// whitespace.
pub fn is_valid_node_name(name: &str) -> bool {
    !name.is_empty() && !name.starts_with('/') && !name.chars().any(char::is_whitespace)
}
