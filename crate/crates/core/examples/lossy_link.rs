//! Reliable and best-effort delivery over a seeded lossy link.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use metaros::bench::loopback_reliable_qos;
use metaros::envelope::PayloadType;
use metaros::executor::{spawn, CfsExecutor, Executor, SchedulerConfig};
use metaros::nodegraph::{Node, NodeOptions, TopicSpec};
use metaros::reliability::QosProfile;
use metaros::transport::{broker_serve, BrokerConfig, EndpointAddress, FaultProfile, FaultyConnector};

const N: i64 = 2000;

fn run(address: &EndpointAddress, topic: &str, qos: QosProfile) -> Result<usize, Box<dyn std::error::Error>> {
    let lossy = |seed| FaultyConnector::new(address.clone(), FaultProfile::lossy(0.2, seed).with_duplicates(0.05));
    let talker = Node::with_connector(&format!("{topic}_pub"), lossy(1)?, NodeOptions::default())?;
    let listener = Node::with_connector(&format!("{topic}_sub"), lossy(2)?, NodeOptions::default())?;
    let spec = TopicSpec::new(topic, PayloadType::Int64).with_qos(qos);
    let got = Arc::new(Mutex::new(Vec::new()));
    let g = got.clone();
    let _sub = listener.subscribe(&spec, move |m| g.lock().unwrap().push(m.value.as_i64().unwrap()))?;
    let mut exec = CfsExecutor::new(SchedulerConfig::default());
    exec.add_node(&listener);
    let _exec = spawn(exec);
    let publisher = talker.advertise(&spec)?;
    for i in 1..=N {
        publisher.publish(i)?;
    }
    if spec.qos.is_reliable() {
        publisher.wait_settled(Duration::from_secs(30));
    }
    std::thread::sleep(Duration::from_millis(300));
    let got = got.lock().unwrap();
    let ordered = got.windows(2).all(|w| w[0] < w[1]);
    println!("{topic}: {} of {N} delivered, in order: {ordered}", got.len());
    Ok(got.len())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let address = EndpointAddress::inproc("lossy-link");
    let _broker = broker_serve(&address, BrokerConfig::default())?;
    run(&address, "reliable", loopback_reliable_qos())?;
    run(&address, "best_effort", QosProfile::best_effort().with_depth(N as usize))?;
    Ok(())
}
