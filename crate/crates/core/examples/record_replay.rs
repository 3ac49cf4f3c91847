//! Records a topic tree to a log file, then replays it at the original pace.

use std::time::Duration;

use metaros::datalogger::{self, ReplayMode};
use metaros::envelope::PayloadType;
use metaros::executor::{spawn, CfsExecutor, Executor, SchedulerConfig};
use metaros::nodegraph::{Node, TopicSpec};
use metaros::transport::{broker_serve, BrokerConfig, EndpointAddress};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let broker = broker_serve(&EndpointAddress::inproc("record-replay"), BrokerConfig::default())?;
    let robot = Node::connect("robot", broker.address())?;
    let logger = Node::connect("logger", broker.address())?;
    let mut exec = CfsExecutor::new(SchedulerConfig::default());
    exec.add_node(&logger);
    let _exec = spawn(exec);

    let path = std::env::temp_dir().join(format!("metaros-example-{}.mroslog", std::process::id()));
    let recorder = datalogger::record(&logger, &["robot/*"], &path)?;
    let odom = robot.advertise(&TopicSpec::new("robot/odom", PayloadType::Float64))?;
    let log = robot.advertise(&TopicSpec::new("robot/log", PayloadType::StringUtf8))?;
    for i in 0..10 {
        odom.publish(i as f64 * 0.1)?;
        if i % 3 == 0 {
            log.publish(format!("checkpoint {i}"))?;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    std::thread::sleep(Duration::from_millis(50));
    let stats = recorder.close()?;
    println!("recorded {} frames ({} bytes) to {}", stats.frames, stats.bytes, path.display());

    let replay = datalogger::replay(&path, &robot, ReplayMode::Timed)?;
    println!("replayed {} frames on {} topics in {:?}", replay.published, replay.topics, replay.elapsed);
    std::fs::remove_file(&path)?;
    Ok(())
}
