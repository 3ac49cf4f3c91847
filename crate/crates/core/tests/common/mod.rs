#![allow(dead_code)]

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use metaros::executor::{spawn, CfsExecutor, Executor, SchedulerConfig, SpinHandle};
use metaros::nodegraph::{Node, NodeOptions};
use metaros::transport::{broker_serve, BrokerConfig, BrokerHandle, Connector, EndpointAddress};

static NEXT: AtomicU64 = AtomicU64::new(0);

pub fn inproc_broker() -> BrokerHandle {
    let key = format!("test-{}-{}", std::process::id(), NEXT.fetch_add(1, Ordering::Relaxed));
    broker_serve(&EndpointAddress::inproc(key), BrokerConfig::default()).expect("broker starts")
}

pub fn node(broker: &BrokerHandle, name: &str) -> Node {
    Node::with_connector(name, broker.address().clone(), NodeOptions::default().with_seed(7)).expect("node connects")
}

pub fn node_via(name: &str, connector: impl Connector + 'static) -> Node {
    Node::with_connector(name, connector, NodeOptions::default().with_seed(7)).expect("node connects")
}

pub fn spin(node: &Node) -> SpinHandle<CfsExecutor> {
    let mut exec = CfsExecutor::new(SchedulerConfig::default());
    exec.add_node(node);
    spawn(exec)
}

pub fn wait_for(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    cond()
}

/// Frame bytes laid out field by field, independently of the codec.
pub fn reference_encoding(f: &metaros::envelope::Frame) -> Vec<u8> {
    let mut v = b"MROS".to_vec();
    v.push(1);
    v.push(f.kind as u8);
    v.push(f.payload_type as u8);
    v.push(f.flags.bits());
    v.extend(f.sequence.to_be_bytes());
    v.extend(f.timestamp_send.to_be_bytes());
    v.extend((f.topic.len() as u16).to_be_bytes());
    v.extend(f.topic.as_bytes());
    v.extend(f.correlation.as_u128().to_be_bytes());
    v.extend((f.payload.len() as u32).to_be_bytes());
    v.extend(&f.payload[..]);
    v
}
