//! A request/response service and non-blocking calls matched by
//! correlation id.

use std::time::Duration;

use metaros::envelope::{PayloadType, Value};
use metaros::executor::{spawn, CfsExecutor, Executor, SchedulerConfig};
use metaros::nodegraph::Node;
use metaros::transport::{broker_serve, BrokerConfig, EndpointAddress};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let broker = broker_serve(&EndpointAddress::inproc("add-service"), BrokerConfig::default())?;
    let server = Node::connect("doubler", broker.address())?;
    let client = Node::connect("client", broker.address())?;

    let _svc = server.create_service("double", PayloadType::Int64, PayloadType::Int64, |v| {
        let x = v.as_i64().ok_or("expected an integer")?;
        x.checked_mul(2).map(Value::Int64).ok_or_else(|| "overflow".to_string())
    })?;
    let mut exec = CfsExecutor::new(SchedulerConfig::default());
    exec.add_node(&server);
    let _exec = spawn(exec);

    let timeout = Duration::from_secs(2);
    let tokens: Vec<_> = (1..=5i64).map(|i| client.call_async("double", i, timeout)).collect();
    for (i, t) in tokens.iter().enumerate() {
        println!("double({}) = {:?}", i + 1, t.wait_result(timeout)?);
    }
    println!("overflow -> {:?}", client.call("double", i64::MAX, timeout));
    println!("missing  -> {:?}", client.call("triple", 1i64, timeout));
    Ok(())
}
