//! A TCP broker on loopback and the node graph it reports.

use std::net::TcpListener;

use metaros::envelope::PayloadType;
use metaros::nodegraph::{Node, TopicSpec};
use metaros::transport::{serve_listener, BrokerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let broker = serve_listener(TcpListener::bind("127.0.0.1:0")?, BrokerConfig::default())?;
    println!("broker at {}", broker.address());
    let camera = Node::connect("camera", broker.address())?;
    let viewer = Node::connect("viewer", broker.address())?;
    let _images = camera.advertise(&TopicSpec::new("camera/frames", PayloadType::Image))?;
    let _sub = viewer.subscribe(&TopicSpec::new("camera/frames", PayloadType::Image), |_| {})?;
    let _svc = camera.create_service("camera/reset", PayloadType::Null, PayloadType::Bool, |_| Ok(true.into()))?;
    println!("{}", serde_json::to_string_pretty(&viewer.graph()?)?);
    Ok(())
}
