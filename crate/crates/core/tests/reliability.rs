mod common;

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use common::{node_via, spin, wait_for};
use metaros::envelope::PayloadType;
use metaros::nodegraph::{Message, NodeStatus, TopicSpec};
use metaros::reliability::QosProfile;
use metaros::transport::{broker_serve, BrokerConfig, EndpointAddress, FaultProfile, FaultyConnector};

fn lossy(seed: u64) -> FaultProfile {
    FaultProfile::lossy(0.2, seed).with_duplicates(0.05)
}

fn recorder() -> (Arc<Mutex<Vec<Message>>>, impl FnMut(Message) + Send + 'static) {
    let got = Arc::new(Mutex::new(Vec::new()));
    let g = got.clone();
    (got, move |m| g.lock().unwrap().push(m))
}

fn fresh_address(tag: &str) -> EndpointAddress {
    EndpointAddress::inproc(format!("{tag}-{}", std::process::id()))
}

#[test]
fn reliable_delivery_is_exactly_once_and_ordered_under_loss() {
    const N: i64 = 10_000;
    let address = fresh_address("reliable");
    let _broker = broker_serve(&address, BrokerConfig::default()).unwrap();
    let talker = node_via("talker", FaultyConnector::new(address.clone(), lossy(1)).unwrap());
    let listener = node_via("listener", FaultyConnector::new(address.clone(), lossy(2)).unwrap());
    // in-process round trips take microseconds, so acks are overdue quickly
    let qos = QosProfile::reliable()
        .with_depth(1024)
        .with_retries(20)
        .with_ack_timeout(Duration::from_millis(40))
        .with_backoff(Duration::from_millis(10), Duration::from_millis(200));
    let spec = TopicSpec::new("telemetry", PayloadType::Int64).with_qos(qos);
    let (got, cb) = recorder();
    let _sub = listener.subscribe(&spec, cb).unwrap();
    let _exec = spin(&listener);
    let publisher = talker.advertise(&spec).unwrap();
    let start = Instant::now();
    for i in 1..=N {
        publisher.publish(i).unwrap();
    }
    assert!(publisher.wait_settled(Duration::from_secs(60)));
    assert!(publisher.take_failures().is_empty());
    assert!(wait_for(Duration::from_secs(5), || got.lock().unwrap().len() == N as usize));
    std::thread::sleep(Duration::from_millis(100));
    let got = got.lock().unwrap();
    let values: Vec<i64> = got.iter().map(|m| m.value.as_i64().unwrap()).collect();
    assert_eq!(values, (1..=N).collect::<Vec<_>>());
    assert!(start.elapsed() < Duration::from_secs(60));
    let stats = publisher.stats();
    assert!(stats.retry.retransmissions > 0);
}

#[test]
fn best_effort_delivery_matches_the_drop_rate() {
    const N: f64 = 10_000.0;
    let address = fresh_address("best-effort");
    let _broker = broker_serve(&address, BrokerConfig::default()).unwrap();
    let talker = node_via("talker", FaultyConnector::new(address.clone(), lossy(3)).unwrap());
    let listener = node_via("listener", FaultyConnector::new(address.clone(), lossy(4)).unwrap());
    let spec = TopicSpec::new("telemetry", PayloadType::Int64).with_qos(QosProfile::best_effort().with_depth(20_000));
    let (got, cb) = recorder();
    let sub = listener.subscribe(&spec, cb).unwrap();
    let _exec = spin(&listener);
    let publisher = talker.advertise(&spec).unwrap();
    for i in 1..=N as i64 {
        publisher.publish(i).unwrap();
    }
    std::thread::sleep(Duration::from_millis(300));
    let delivered = got.lock().unwrap().len() as f64;
    let p = 0.8;
    let sigma = (N * p * (1.0 - p)).sqrt();
    assert!((delivered - N * p).abs() <= 3.0 * sigma, "delivered {delivered}");
    // duplicates injected on the wire never reach the callback
    let got = got.lock().unwrap();
    assert!(got.windows(2).all(|w| w[0].sequence < w[1].sequence));
    assert!(sub.stats().duplicates > 0);
}

#[test]
fn broker_restart_loses_nothing_and_restores_the_graph() {
    let address = fresh_address("failover");
    let mut broker = broker_serve(&address, BrokerConfig::default()).unwrap();
    let talker = node_via("talker", address.clone());
    let listener = node_via("listener", address.clone());
    let qos = QosProfile::reliable().with_depth(1024);
    let spec = TopicSpec::new("odom", PayloadType::Int64).with_qos(qos);
    let (got, cb) = recorder();
    let _sub = listener.subscribe(&spec, cb).unwrap();
    let _svc = listener
        .create_service("ping", PayloadType::Int64, PayloadType::Int64, Ok)
        .unwrap();
    let _exec = spin(&listener);
    let publisher = talker.advertise(&spec).unwrap();
    let before = talker.graph().unwrap();

    let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let pumping = {
        let stop = stop.clone();
        std::thread::spawn(move || {
            let mut i = 0i64;
            while !stop.load(std::sync::atomic::Ordering::SeqCst) {
                i += 1;
                publisher.publish(i).unwrap();
                std::thread::sleep(Duration::from_millis(2));
            }
            (publisher, i)
        })
    };
    std::thread::sleep(Duration::from_millis(200));
    broker.shutdown();
    assert!(wait_for(Duration::from_secs(3), || talker.status() == NodeStatus::Reconnecting));
    std::thread::sleep(Duration::from_secs(1));
    let _broker = broker_serve(&address, BrokerConfig::default()).unwrap();
    assert!(talker.wait_connected(Duration::from_secs(5)));
    assert!(listener.wait_connected(Duration::from_secs(5)));
    std::thread::sleep(Duration::from_millis(200));
    stop.store(true, std::sync::atomic::Ordering::SeqCst);
    let (publisher, sent) = pumping.join().unwrap();

    assert!(publisher.wait_settled(Duration::from_secs(10)));
    assert!(publisher.take_failures().is_empty());
    assert!(wait_for(Duration::from_secs(5), || got.lock().unwrap().len() == sent as usize));
    let values: Vec<i64> = got.lock().unwrap().iter().map(|m| m.value.as_i64().unwrap()).collect();
    assert_eq!(values, (1..=sent).collect::<Vec<_>>());
    assert!(wait_for(Duration::from_secs(3), || talker.graph().unwrap() == before));
    assert!(metaros::nodegraph::NodeCounters::get(&talker.counters().reconnects) >= 1);
}
