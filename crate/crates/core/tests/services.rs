mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use common::{inproc_broker, node, node_via, spin, wait_for};
use metaros::envelope::{PayloadType, Value};
use metaros::nodegraph::{NodeCounters, NodeError};
use metaros::services::{CallError, TokenState};
use metaros::transport::{FaultProfile, FaultyConnector};

const SECOND: Duration = Duration::from_secs(1);

#[test]
fn echo_service_returns_request() {
    let broker = inproc_broker();
    let server = node(&broker, "server");
    let client = node(&broker, "client");
    let _svc = server
        .create_service("echo", PayloadType::Int64, PayloadType::Int64, Ok)
        .unwrap();
    let _spin = spin(&server);
    assert_eq!(client.call("echo", 5i64, SECOND), Ok(Value::Int64(5)));
}

#[test]
fn handler_error_fails_the_call_with_its_text() {
    let broker = inproc_broker();
    let server = node(&broker, "server");
    let client = node(&broker, "client");
    let _svc = server
        .create_service("boom", PayloadType::Int64, PayloadType::Int64, |_| Err("no fuel".to_string()))
        .unwrap();
    let _panics = server
        .create_service("panics", PayloadType::Int64, PayloadType::Int64, |_| panic!("gear stripped"))
        .unwrap();
    let _spin = spin(&server);
    let token = client.call_async("boom", 1i64, SECOND);
    assert_eq!(token.wait(SECOND), TokenState::Failed);
    assert_eq!(token.result(), Err(CallError::Failed("no fuel".into())));
    match client.call("panics", 1i64, SECOND) {
        Err(CallError::Failed(msg)) => assert!(msg.contains("gear stripped"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn wrong_request_type_is_rejected_by_the_server() {
    let broker = inproc_broker();
    let server = node(&broker, "server");
    let client = node(&broker, "client");
    let _svc = server
        .create_service("echo", PayloadType::Int64, PayloadType::Int64, Ok)
        .unwrap();
    let _spin = spin(&server);
    assert!(matches!(client.call("echo", "five", SECOND), Err(CallError::Failed(_))));
}

#[test]
fn two_services_on_one_node_are_routed_independently() {
    let broker = inproc_broker();
    let server = node(&broker, "server");
    let client = node(&broker, "client");
    let _double = server
        .create_service("double", PayloadType::Int64, PayloadType::Int64, |v| {
            Ok(Value::Int64(v.as_i64().unwrap() * 2))
        })
        .unwrap();
    let _negate = server
        .create_service("negate", PayloadType::Int64, PayloadType::Int64, |v| {
            Ok(Value::Int64(-v.as_i64().unwrap()))
        })
        .unwrap();
    let _spin = spin(&server);
    let routes: [(&str, fn(i64) -> i64); 2] = [("double", |x| x * 2), ("negate", |x| -x)];
    let mut tokens = Vec::new();
    for i in 0..50i64 {
        for (name, f) in &routes {
            tokens.push((client.call_async(name, i, SECOND), f(i)));
        }
    }
    for (token, expected) in tokens {
        assert_eq!(token.wait_result(SECOND), Ok(Value::Int64(expected)));
    }
}

#[test]
fn thousand_concurrent_calls_pair_by_correlation_under_reordering() {
    let broker = inproc_broker();
    let profile = FaultProfile::default().with_delay(Duration::ZERO, Duration::from_millis(5));
    // requests and responses are both reordered
    let server = node_via(
        "adder",
        FaultyConnector::new(broker.address().clone(), FaultProfile { seed: 12, ..profile.clone() }).unwrap(),
    );
    let client = node_via(
        "client",
        FaultyConnector::new(broker.address().clone(), FaultProfile { seed: 11, ..profile }).unwrap(),
    );
    let _svc = server
        .create_service("add_one", PayloadType::Int64, PayloadType::Int64, |v| {
            Ok(Value::Int64(v.as_i64().unwrap() + 1))
        })
        .unwrap();
    let _spin = spin(&server);
    let mut requests = HashMap::new();
    let tokens: Vec<_> = (0..1000i64)
        .map(|i| {
            let t = client.call_async("add_one", i, Duration::from_secs(10));
            requests.insert(t.correlation(), i);
            t
        })
        .collect();
    assert_eq!(requests.len(), 1000, "correlation ids are unique");
    for t in &tokens {
        let i = requests[&t.correlation()];
        assert_eq!(t.wait_result(Duration::from_secs(10)), Ok(Value::Int64(i + 1)));
    }
}

#[test]
fn unknown_service_fails_promptly() {
    let broker = inproc_broker();
    let client = node(&broker, "client");
    let start = Instant::now();
    let token = client.call_async("nope", 1i64, Duration::from_secs(5));
    assert_eq!(token.wait(Duration::from_secs(5)), TokenState::Failed);
    assert!(start.elapsed() < Duration::from_millis(500));
}

#[test]
fn stalled_server_times_out_and_late_reply_is_discarded() {
    let broker = inproc_broker();
    let server = node(&broker, "server");
    let client = node(&broker, "client");
    let _svc = server
        .create_service("slow", PayloadType::Int64, PayloadType::Int64, |v| {
            std::thread::sleep(Duration::from_millis(400));
            Ok(v)
        })
        .unwrap();
    let _spin = spin(&server);
    let start = Instant::now();
    let token = client.call_async("slow", 1i64, Duration::from_millis(100));
    assert!(start.elapsed() < Duration::from_millis(10), "call_async blocked");
    assert_eq!(token.wait(SECOND), TokenState::TimedOut);
    let waited = start.elapsed();
    assert!(waited >= Duration::from_millis(100) && waited < Duration::from_millis(200), "{waited:?}");
    assert!(wait_for(SECOND, || NodeCounters::get(&client.counters().stale_responses) == 1));
    assert_eq!(token.result(), Err(CallError::TimedOut));
}

#[test]
fn duplicate_service_name_is_refused() {
    let broker = inproc_broker();
    let a = node(&broker, "a");
    let b = node(&broker, "b");
    let _svc = a.create_service("svc", PayloadType::Int64, PayloadType::Int64, Ok).unwrap();
    let dup = b.create_service("svc", PayloadType::Int64, PayloadType::Int64, Ok);
    assert!(matches!(dup, Err(NodeError::Rejected(_))));
    assert!(matches!(
        a.create_service("svc", PayloadType::Int64, PayloadType::Int64, Ok),
        Err(NodeError::Rejected(_))
    ));
}

#[test]
fn dropping_the_server_unregisters_the_name() {
    let broker = inproc_broker();
    let server = node(&broker, "server");
    let client = node(&broker, "client");
    let svc = server.create_service("svc", PayloadType::Int64, PayloadType::Int64, Ok).unwrap();
    drop(svc);
    assert!(wait_for(SECOND, || !broker.graph_info().services.contains(&"svc".to_string())));
    assert!(matches!(client.call("svc", 1i64, SECOND), Err(CallError::Failed(_))));
    let _again = client.create_service("svc", PayloadType::Int64, PayloadType::Int64, Ok).unwrap();
}
