//! Declared, validated node parameters, read and changed remotely.

use std::time::Duration;

use metaros::envelope::Value;
use metaros::executor::{spawn, CfsExecutor, Executor, SchedulerConfig};
use metaros::nodegraph::{Node, ParameterDecl, Validator};
use metaros::transport::{broker_serve, BrokerConfig, EndpointAddress};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let broker = broker_serve(&EndpointAddress::inproc("parameters"), BrokerConfig::default())?;
    let camera = Node::connect("camera", broker.address())?;
    let console = Node::connect("console", broker.address())?;

    camera.declare_parameter(ParameterDecl::new("fps", 30i64).with_validator(Validator::IntRange { min: 1, max: 120 }))?;
    camera.declare_parameter(ParameterDecl::new("label", "front"))?;
    let mut exec = CfsExecutor::new(SchedulerConfig::default());
    exec.add_node(&camera);
    let _exec = spawn(exec);

    let t = Duration::from_secs(2);
    println!("parameters: {:?}", console.list_remote_parameters("camera", t)?);
    println!("fps = {}", console.get_remote_parameter("camera", "fps", t)?);
    console.set_remote_parameter("camera", "fps", Value::Int64(60), t)?;
    println!("fps after set = {}", camera.get_parameter("fps")?);
    println!("fps = 500 -> {:?}", console.set_remote_parameter("camera", "fps", Value::Int64(500), t));
    Ok(())
}
