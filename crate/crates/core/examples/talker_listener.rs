//! Typed publish/subscribe through an in-process broker, with a wildcard
//! monitor that sees every topic under `sensors/`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use metaros::envelope::PayloadType;
use metaros::executor::{spawn, CfsExecutor, Executor, SchedulerConfig};
use metaros::nodegraph::{Node, TopicSpec};
use metaros::reliability::QosProfile;
use metaros::transport::{broker_serve, BrokerConfig, EndpointAddress};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let broker = broker_serve(&EndpointAddress::inproc("talker-listener"), BrokerConfig::default())?;
    let talker = Node::connect("talker", broker.address())?;
    let listener = Node::connect("listener", broker.address())?;

    let temp = TopicSpec::new("sensors/temp", PayloadType::Float64);
    let _sub = listener.subscribe(&temp, |m| println!("temp #{}: {}", m.sequence, m.value))?;
    let seen = Arc::new(AtomicUsize::new(0));
    let s = seen.clone();
    let _monitor = listener.subscribe_any("sensors/*", QosProfile::default(), move |m| {
        s.fetch_add(1, Ordering::Relaxed);
        println!("  monitor saw {} = {}", m.topic, m.value);
    })?;
    let mut exec = CfsExecutor::new(SchedulerConfig::default());
    exec.add_node(&listener);
    let exec = spawn(exec);

    let temps = talker.advertise(&temp)?;
    let status = talker.advertise(&TopicSpec::new("sensors/status", PayloadType::StringUtf8))?;
    for i in 0..5 {
        temps.publish(20.0 + i as f64 * 0.5)?;
        status.publish(format!("ok {i}"))?;
        std::thread::sleep(Duration::from_millis(20));
    }
    std::thread::sleep(Duration::from_millis(100));
    println!("monitor received {} messages", seen.load(Ordering::Relaxed));
    exec.stop();
    Ok(())
}
